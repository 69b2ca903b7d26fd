//! End-to-end commands: train both stages, evaluate, ablate, and write the
//! line-oriented outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalResult, Protocol, SampleMeta};
use crate::model::{check_dataset, SciModel, Variant};
use crate::sim::{extract_embedding, train_stage2, Stage2Epoch};
use crate::sse::{train_stage1, Stage1Epoch};
use crate::synthdata::{self, Dataset, Split};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ABLATION_FILE: &str = "ablation.jsonl";

pub struct TrainOutcome {
    pub model: SciModel,
    pub stage1: Vec<Stage1Epoch>,
    pub stage2: Vec<Stage2Epoch>,
}

/// Loads `cfg.dataset`, or synthesises one from `cfg.synth`.
pub fn obtain_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(dir) => synthdata::load(dir),
        None => synthdata::generate(&cfg.synth),
    }
}

pub fn train(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    check_dataset(&cfg.encoder, dataset)?;
    let mut model = SciModel::for_dataset(cfg.model_config(), dataset)?;
    model.prepare_stage1();
    let stage1 = train_stage1(&mut model, dataset, &cfg.stage1_settings())?;
    let stage2 = train_stage2(&mut model, dataset, &cfg.stage2_settings())?;
    Ok(TrainOutcome { model, stage1, stage2 })
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Eval(format!("thread pool: {e}")))
}

/// Embeddings `[n x d]` and labels of one split.
pub fn embed_split(model: &SciModel, dataset: &Dataset, split: Split, threads: usize) -> Result<(Tensor, Vec<SampleMeta>)> {
    let idx = dataset.indices(split);
    let rows: Vec<Vec<f32>> = pool(threads)?.install(|| {
        idx.par_iter()
            .map(|i| extract_embedding(model, &dataset.samples[*i].image).map(Tensor::into_data))
            .collect::<Result<_>>()
    })?;
    let meta = idx
        .iter()
        .map(|i| {
            let s = &dataset.samples[*i];
            SampleMeta {
                pid: s.pid,
                clothes_id: s.clothes_id,
                camera_id: s.camera_id,
            }
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Data(format!("dataset has no {split:?} samples")));
    }
    Ok((Tensor::from_rows(&rows)?, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub protocol: Protocol,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub num_valid_queries: usize,
    pub num_skipped: usize,
    pub cmc: Vec<f64>,
}

impl ProtocolMetrics {
    pub fn new(protocol: Protocol, r: &EvalResult) -> Self {
        Self {
            protocol,
            rank1: r.rank(1),
            rank5: r.rank(5),
            rank10: r.rank(10),
            map: r.map,
            num_valid_queries: r.num_valid_queries,
            num_skipped: r.num_skipped,
            cmc: r.cmc.clone(),
        }
    }

    pub fn eval_result(&self) -> EvalResult {
        EvalResult {
            cmc: self.cmc.clone(),
            map: self.map,
            num_valid_queries: self.num_valid_queries,
            num_skipped: self.num_skipped,
        }
    }
}

pub fn evaluate_model(
    model: &SciModel,
    dataset: &Dataset,
    protocols: &[Protocol],
    kmax: usize,
    threads: usize,
) -> Result<Vec<ProtocolMetrics>> {
    check_dataset(&model.config.encoder, dataset)?;
    let (q, qm) = embed_split(model, dataset, Split::Query, threads)?;
    let (g, gm) = embed_split(model, dataset, Split::Gallery, threads)?;
    protocols
        .iter()
        .map(|p| Ok(ProtocolMetrics::new(*p, &evaluate(&q, &g, &qm, &gm, *p, kmax, threads)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Vec<ProtocolMetrics>,
}

/// Trains and evaluates the four variants with the same seed and data.
pub fn ablate(cfg: &RunConfig, dataset: &Dataset, threads: usize) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.variant = *v;
            let out = train(&c, dataset)?;
            let metrics = evaluate_model(&out.model, dataset, &c.protocols, c.kmax, threads)?;
            log::info!("variant {} done", v.name());
            Ok(AblationRow { variant: *v, metrics })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:<15} {:>7} {:>7}", "variant", "protocol", "rank1", "mAP");
    for row in rows {
        for m in &row.metrics {
            let _ = writeln!(
                s,
                "{:<10} {:<15} {:>7.4} {:>7.4}",
                row.variant.name(),
                m.protocol.name(),
                m.rank1,
                m.map
            );
        }
    }
    s
}

/// Header record embedded at the top of every output file.
pub fn config_record(cfg: &RunConfig) -> Value {
    json!({
        "kind": "config",
        "seed": cfg.seed(),
        "config": cfg,
    })
}

/// Run record stored in checkpoints: the config without its output
/// directory, so the checkpoint bytes do not depend on where they are written.
pub fn checkpoint_record(cfg: &RunConfig) -> Value {
    let mut c = cfg.clone();
    c.output_dir = None;
    config_record(&c)
}

pub fn write_jsonl(path: &Path, records: &[Value]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn train_log_records(cfg: &RunConfig, out: &TrainOutcome) -> Result<Vec<Value>> {
    let mut records = vec![config_record(cfg)];
    for e in &out.stage1 {
        let mut v = serde_json::to_value(e).map_err(|e| Error::Data(e.to_string()))?;
        v["kind"] = json!("stage1");
        records.push(v);
    }
    for e in &out.stage2 {
        let mut v = serde_json::to_value(e).map_err(|e| Error::Data(e.to_string()))?;
        v["kind"] = json!("stage2");
        records.push(v);
    }
    Ok(records)
}

pub fn metrics_records(cfg: &RunConfig, metrics: &[ProtocolMetrics]) -> Result<Vec<Value>> {
    let mut records = vec![config_record(cfg)];
    for m in metrics {
        let mut v = serde_json::to_value(m).map_err(|e| Error::Data(e.to_string()))?;
        v["kind"] = json!("metrics");
        records.push(v);
    }
    Ok(records)
}

/// Metrics rows of a metrics file, skipping the config header.
pub fn read_metrics(path: &Path) -> Result<Vec<ProtocolMetrics>> {
    read_jsonl(path)?
        .into_iter()
        .filter(|v| v["kind"] == "metrics")
        .map(|mut v| {
            if let Some(o) = v.as_object_mut() {
                o.remove("kind");
            }
            serde_json::from_value(v).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn ablation_records(cfg: &RunConfig, rows: &[AblationRow]) -> Vec<Value> {
    let mut records = vec![config_record(cfg)];
    for row in rows {
        for m in &row.metrics {
            records.push(json!({
                "kind": "ablation",
                "variant": row.variant.name(),
                "use_sse": row.variant.use_sse,
                "use_sim": row.variant.use_sim,
                "protocol": m.protocol,
                "rank1": m.rank1,
                "map": m.map,
                "num_valid_queries": m.num_valid_queries,
            }));
        }
    }
    records
}

/// Refuses to overwrite an existing path unless `force` is set.
pub fn ensure_fresh(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
