#![allow(dead_code)]

use sci_core::autodiff::gradcheck::{check_params, GradCheckReport};
use sci_core::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use sci_core::encoders::{attention, EncoderConfig};
use sci_core::model::{ModelConfig, SciModel, Variant};
use sci_core::rng;
use sci_core::sim::{self, CalHead, SimConfig};
use sci_core::sse::{self, clo_pairing, SseConfig, SseLossWeights};
use sci_core::synthdata::{self, Dataset, Split, SynthConfig};
use sci_core::Result;

/// Finite-difference step and tolerance used by every gradient check. The
/// forward pass runs in f64, so a small step costs no precision.
pub const FD_STEP: f32 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
pub const ENTRIES_PER_PARAM: usize = 8;

#[derive(Clone, Copy)]
pub enum Init {
    Normal,
    /// Bounded away from zero, for denominators.
    Positive,
}

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Init)>,
    pub f: OpFn,
}

fn case(
    name: &'static str,
    inputs: &[(&[usize], Init)],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, i)| (s.to_vec(), *i)).collect(),
        f: Box::new(f),
    }
}

const N: Init = Init::Normal;
const P: Init = Init::Positive;

fn soft_targets(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    for r in 0..rows {
        let total: f32 = (0..cols).map(|c| (1 + (r + 2 * c) % 3) as f32).sum();
        for c in 0..cols {
            t.data_mut()[r * cols + c] = (1 + (r + 2 * c) % 3) as f32 / total;
        }
    }
    t
}

/// Every differentiable tape op and loss, each on small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    let labels = clo_pairing(&[(0, 0), (0, 1), (1, 2), (1, 3), (2, 4)]).expect("pairing");
    let mut scratch = ParamStore::new();
    let head = CalHead::new(&mut scratch, &labels, 6, 1.0 / 16.0, 0);
    vec![
        case("matmul", &[(&[3, 4], N), (&[4, 2], N)], |g, v| g.matmul(v[0], v[1])),
        case("transpose", &[(&[3, 4], N)], |g, v| g.transpose(v[0])),
        case("matmul_t", &[(&[3, 4], N), (&[2, 4], N)], |g, v| g.matmul_t(v[0], v[1])),
        case("add", &[(&[3, 4], N), (&[3, 4], N)], |g, v| g.add(v[0], v[1])),
        case("sub", &[(&[3, 4], N), (&[3, 4], N)], |g, v| g.sub(v[0], v[1])),
        case("mul", &[(&[3, 4], N), (&[3, 4], N)], |g, v| g.mul(v[0], v[1])),
        case("div", &[(&[3, 4], N), (&[3, 4], P)], |g, v| g.div(v[0], v[1])),
        case("add_row", &[(&[3, 4], N), (&[4], N)], |g, v| g.add_row(v[0], v[1])),
        case("mul_row", &[(&[3, 4], N), (&[4], N)], |g, v| g.mul_row(v[0], v[1])),
        case("mul_col", &[(&[3, 4], N), (&[3], N)], |g, v| g.mul_col(v[0], v[1])),
        case("scale", &[(&[3, 4], N)], |g, v| Ok(g.scale(v[0], -0.7))),
        case("add_scalar", &[(&[3, 4], N)], |g, v| {
            let s = g.add_scalar(v[0], 1.5);
            g.mul(s, s)
        }),
        case("gelu", &[(&[3, 4], N)], |g, v| Ok(g.gelu(v[0]))),
        case("softmax_rows", &[(&[3, 4], N)], |g, v| g.softmax(v[0], 1)),
        case("softmax_cols", &[(&[3, 4], N)], |g, v| g.softmax(v[0], 0)),
        case("log_softmax", &[(&[3, 4], N)], |g, v| g.log_softmax(v[0])),
        case("layer_norm", &[(&[3, 5], N), (&[5], N), (&[5], N)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("l2_normalize_rows", &[(&[3, 4], N)], |g, v| g.l2_normalize_rows(v[0])),
        case("sum", &[(&[3, 4], N)], |g, v| {
            let s = g.sum(v[0]);
            g.mul(s, s)
        }),
        case("mean", &[(&[3, 4], N)], |g, v| {
            let s = g.mean(v[0]);
            g.mul(s, s)
        }),
        case("sum_last_axis", &[(&[3, 4], N)], |g, v| g.sum_last_axis(v[0])),
        case("mean_rows", &[(&[3, 4], N)], |g, v| g.mean_rows(v[0])),
        case("gather_rows", &[(&[3, 4], N)], |g, v| {
            g.gather_rows_padded(v[0], vec![Some(2), None, Some(0), Some(2)])
        }),
        case("concat_rows", &[(&[2, 4], N), (&[4], N)], |g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        case("reshape", &[(&[3, 4], N), (&[3, 2], N)], |g, v| {
            let r = g.reshape(v[0], vec![4, 3])?;
            g.matmul(r, v[1])
        }),
        case("pick", &[(&[3, 4], N)], |g, v| g.pick(v[0], vec![(0, 1), (2, 3), (0, 1), (1, 0)])),
        case("log_sum_exp_subsets", &[(&[3, 4], N)], |g, v| {
            g.log_sum_exp_subsets(v[0], vec![(0, vec![0, 2, 3]), (1, vec![1]), (2, vec![0, 1, 2, 3])])
        }),
        case("cross_entropy", &[(&[3, 4], N)], |g, v| g.cross_entropy(v[0], &soft_targets(3, 4))),
        case("attention", &[(&[3, 4], N), (&[5, 4], N), (&[5, 4], N)], |g, v| {
            attention(g, v[0], v[1], v[2])
        }),
        case("text_guided_attention", &[(&[5, 4], N), (&[3, 4], N)], |g, v| {
            sim::text_guided_attention(g, v[0], v[1])
        }),
        case("fuse", &[(&[5, 4], N), (&[5, 4], N), (&[4], N)], |g, v| sim::fuse(g, v[0], v[1], v[2])),
        case("project_rows", &[(&[3, 4], N), (&[3, 4], N)], |g, v| sse::project_rows(g, v[0], v[1])),
        case("orthogonalize_rows", &[(&[3, 4], N), (&[3, 4], N)], |g, v| {
            let p = sse::project_rows(g, v[1], v[0])?;
            sse::orthogonalize_rows(g, v[0], p)
        }),
        case("cosine_rows", &[(&[3, 4], N), (&[3, 4], N)], |g, v| sse::cosine_rows(g, v[0], v[1])),
        case("scaled_cosine_logits", &[(&[3, 4], N), (&[5, 4], N)], |g, v| {
            sse::scaled_cosine_logits(g, v[0], v[1], 1.0 / 0.07)
        }),
        case("sse_similarity_loss", &[(&[3, 4], N), (&[3, 4], N), (&[3, 4], N)], |g, v| {
            sse::sse_similarity_loss(g, v[0], v[1], v[2], SseLossWeights::default())
        }),
        case("i2t_loss", &[(&[4, 6], N), (&[4, 6], N)], |g, v| sse::i2t_loss(g, v[0], v[1], 1.0 / 0.07)),
        case("t2i_loss", &[(&[4, 6], N), (&[3, 6], N)], |g, v| {
            sse::t2i_loss(g, v[0], &[0, 1, 0, 2], v[1], 1.0 / 0.07)
        }),
        case("id_loss", &[(&[4, 3], N)], |g, v| sim::id_loss(g, v[0], &[2, 0, 1, 2])),
        case("cal_loss", &[(&[4, 6], N), (&[5, 6], N)], move |g, v| {
            Ok(sim::cal_loss(g, v[0], &[0, 0, 1, 2], &[0, 1, 3, 4], &head, v[1])?.loss)
        }),
        case("i2tce_loss", &[(&[4, 6], N), (&[3, 6], N)], |g, v| {
            sim::i2tce_loss(g, v[0], v[1], &[1, 0, 2, 1], 0.1, 1.0 / 0.07)
        }),
    ]
}

/// Gradient check of one op: inputs are parameters, the output is reduced
/// to a scalar by a fixed random weighting.
pub fn check_op(op: &OpCase, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng::stream(seed, op.name);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = op
        .inputs
        .iter()
        .enumerate()
        .map(|(i, (shape, init))| {
            let mut t = Tensor::randn(shape.clone(), 1.0, &mut r);
            if let Init::Positive = init {
                for x in t.data_mut() {
                    *x = 0.5 + x.abs();
                }
            }
            store.add(format!("{}.{i}", op.name), t.with_requires_grad(true))
        })
        .collect();
    let mut weights: Option<Tensor> = None;
    let mut wr = rng::stream(seed, "weights");
    check_params(&mut store, &ids, FD_STEP, ENTRIES_PER_PARAM, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|id| g.param(s, *id)).collect();
        let out = (op.f)(g, &vars)?;
        if g.shape(out).is_empty() {
            return Ok(out);
        }
        let shape = g.shape(out).to_vec();
        let w = weights.get_or_insert_with(|| Tensor::randn(shape, 1.0, &mut wr));
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    })
}

pub fn tiny_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        height: 8,
        width: 8,
        patch: 4,
        channels: 8,
        token_dim: 8,
        text_dim: 8,
        text_heads: 2,
        seed,
        ..EncoderConfig::default()
    }
}

pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_pids: 4,
        num_train_pids: 3,
        outfits_per_pid: 2,
        cams: 2,
        images_per_group: 1,
        height: 8,
        width: 8,
        seed,
        ..SynthConfig::default()
    }
}

pub fn tiny_model(variant: Variant, seed: u64) -> (SciModel, Dataset) {
    let ds = synthdata::generate(&tiny_synth(seed)).expect("tiny dataset");
    let cfg = ModelConfig {
        encoder: tiny_encoder(seed),
        sse: SseConfig::default(),
        sim: SimConfig::default(),
        variant,
    };
    (SciModel::for_dataset(cfg, &ds).expect("tiny model"), ds)
}

/// `count` training samples spread over identities.
pub fn train_batch(ds: &Dataset, count: usize) -> Vec<usize> {
    let idx = ds.indices(Split::Train);
    let stride = (idx.len() / count).max(1);
    idx.into_iter().step_by(stride).take(count).collect()
}

/// Gradient check of the stage-1 prompt objective w.r.t. both context banks.
pub fn check_prompt_loss(seed: u64) -> Result<GradCheckReport> {
    let (mut model, ds) = tiny_model(Variant::FULL, seed);
    model.prepare_stage1();
    let batch = train_batch(&ds, 4);
    let feats = sse::frozen_image_features(&model, &ds, &batch)?;
    let (pids, clothes) = model.batch_labels(&ds, &batch)?;
    let ids = model.store.ids_with_prefix("prompt");
    let mut store = std::mem::take(&mut model.store);
    check_params(&mut store, &ids, FD_STEP, ENTRIES_PER_PARAM, |g, s| {
        let mut m = model.clone();
        m.store = s.clone();
        Ok(sse::prompt_loss(g, &m, &feats, &pids, &clothes)?.0)
    })
}

/// Gradient check of the stage-2 objective w.r.t. every main-step
/// parameter, with SIM moved off its zero init so every path is live.
pub fn check_stage2_loss(seed: u64) -> Result<GradCheckReport> {
    let (mut model, ds) = tiny_model(Variant::FULL, seed);
    model.prepare_stage2();
    let mut r = rng::stream(seed, "perturb");
    for name in ["sim.alpha", "sim.nonlocal.w"] {
        let id = model.store.find(name).expect("sim param");
        let shape = model.store.get(id).shape().to_vec();
        let t = Tensor::randn(shape, 0.5, &mut r).with_requires_grad(true);
        *model.store.get_mut(id) = t;
    }
    let ids = model.stage2_params();
    model.store.set_requires_grad(&ids, true);
    let batch = train_batch(&ds, 4);
    let (pids, clothes) = model.batch_labels(&ds, &batch)?;
    let images: Vec<Tensor> = batch.iter().map(|i| ds.samples[*i].image.clone()).collect();
    let mut store = std::mem::take(&mut model.store);
    check_params(&mut store, &ids, FD_STEP, ENTRIES_PER_PARAM, |g, s| {
        let mut m = model.clone();
        m.store = s.clone();
        let refs: Vec<&Tensor> = images.iter().collect();
        Ok(sim::stage2_loss(g, &m, &refs, &pids, &clothes)?.0)
    })
}
