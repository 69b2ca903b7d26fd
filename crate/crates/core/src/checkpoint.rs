//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "SCICKPT\0"
//! version  u32
//! meta     u32 length + UTF-8 JSON
//! sections u32 count, then per section:
//!          u32 name length + name, u32 array count, then per array:
//!          u32 name length + name, u32 ndim, u64 dims..., f32 data...
//! ```
//!
//! Sections: `encoders`, `prompt_bank`, `sim`, `heads`, `text_cache`,
//! `optimizer`.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SciModel};
use crate::sse::{LabelSpace, TextFeatureSet};

pub const MAGIC: &[u8; 8] = b"SCICKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub arrays: Vec<(String, Tensor)>,
}

impl Section {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: Value,
    pub sections: Vec<Section>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedCheckpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("name is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| malformed(format!("missing section {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        put_str(&mut out, &self.meta.to_string());
        put_u32(&mut out, self.sections.len() as u32);
        for s in &self.sections {
            put_str(&mut out, &s.name);
            put_u32(&mut out, s.arrays.len() as u32);
            for (name, t) in &s.arrays {
                put_str(&mut out, name);
                put_u32(&mut out, t.ndim() as u32);
                for d in t.shape() {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| malformed("file too short"))? != MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let meta: Value =
            serde_json::from_str(&r.string()?).map_err(|e| malformed(format!("meta: {e}")))?;
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let n = r.u32()?;
            let mut arrays = Vec::new();
            for _ in 0..n {
                let aname = r.string()?;
                let ndim = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let numel = shape
                    .iter()
                    .try_fold(1usize, |a, d| a.checked_mul(*d))
                    .ok_or_else(|| malformed("array too large"))?;
                let bytes = r.take(numel.checked_mul(4).ok_or_else(|| malformed("array too large"))?)?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                arrays.push((aname, Tensor::new(shape, data)?));
            }
            sections.push(Section { name, arrays });
        }
        if r.pos != buf.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(Self {
            version,
            meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn params_section(store: &ParamStore, name: &str, prefixes: &[&str]) -> Section {
    let arrays = prefixes
        .iter()
        .flat_map(|p| store.ids_with_prefix(p))
        .map(|id| {
            let t = store.get(id);
            (
                store.name(id).to_string(),
                Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape"),
            )
        })
        .collect();
    Section {
        name: name.into(),
        arrays,
    }
}

fn adam_entry(store: &ParamStore, tag: &str, opt: &AdamState, arrays: &mut Vec<(String, Tensor)>) -> Value {
    let (m, v) = opt.moments();
    let mut names = Vec::new();
    for (k, id) in opt.params().iter().enumerate() {
        let name = store.name(*id).to_string();
        let shape = store.get(*id).shape().to_vec();
        arrays.push((format!("{tag}.m.{name}"), Tensor::new(shape.clone(), m[k].clone()).expect("moment shape")));
        arrays.push((format!("{tag}.v.{name}"), Tensor::new(shape, v[k].clone()).expect("moment shape")));
        names.push(name);
    }
    json!({
        "step": opt.step,
        "lr": opt.lr,
        "beta1": opt.betas.0,
        "beta2": opt.betas.1,
        "eps": opt.eps,
        "params": names,
    })
}

/// Snapshot of a model. `run` is stored verbatim in the metadata.
pub fn from_model(model: &SciModel, run: Value) -> Result<Checkpoint> {
    let store = &model.store;
    let mut sections = vec![
        params_section(store, "encoders", &["text", "visual"]),
        params_section(store, "prompt_bank", &["prompt"]),
        params_section(store, "sim", &["sim"]),
        params_section(store, "heads", &["head"]),
    ];
    let cache = model
        .text_cache
        .as_ref()
        .ok_or_else(|| Error::contract("checkpoint needs cached text features"))?;
    sections.push(Section {
        name: "text_cache".into(),
        arrays: vec![
            ("f_id".into(), cache.f_id.clone()),
            ("f_clo".into(), cache.f_clo.clone()),
            ("f_proj".into(), cache.f_proj.clone()),
            ("f_ort".into(), cache.f_ort.clone()),
        ],
    });
    let mut arrays = Vec::new();
    let mut optimizers = serde_json::Map::new();
    if let Some(opt) = &model.optim_stage1 {
        optimizers.insert("stage1".into(), adam_entry(store, "stage1", opt, &mut arrays));
    }
    if let Some((main, cal)) = &model.optim_stage2 {
        optimizers.insert("stage2".into(), adam_entry(store, "stage2", main, &mut arrays));
        optimizers.insert("stage2_cal".into(), adam_entry(store, "stage2_cal", cal, &mut arrays));
    }
    sections.push(Section {
        name: "optimizer".into(),
        arrays,
    });
    let meta = json!({
        "format": "sci-checkpoint",
        "model": serde_json::to_value(&model.config).map_err(|e| malformed(e.to_string()))?,
        "labels": serde_json::to_value(&model.labels).map_err(|e| malformed(e.to_string()))?,
        "optimizers": optimizers,
        "run": run,
    });
    Ok(Checkpoint {
        version: VERSION,
        meta,
        sections,
    })
}

fn restore_adam(store: &ParamStore, tag: &str, meta: &Value, section: &Section) -> Result<AdamState> {
    let field = |k: &str| meta.get(k).ok_or_else(|| malformed(format!("optimizer {tag} lacks {k}")));
    let num = |k: &str| -> Result<f32> {
        field(k)?
            .as_f64()
            .map(|v| v as f32)
            .ok_or_else(|| malformed(format!("optimizer {tag}.{k} is not a number")))
    };
    let step = field("step")?
        .as_u64()
        .ok_or_else(|| malformed(format!("optimizer {tag}.step")))?;
    let names = field("params")?
        .as_array()
        .ok_or_else(|| malformed(format!("optimizer {tag}.params")))?;
    let (mut ids, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for n in names {
        let n = n.as_str().ok_or_else(|| malformed("optimizer param name"))?;
        ids.push(store.find(n).ok_or_else(|| malformed(format!("optimizer tracks unknown {n}")))?);
        let get = |kind: &str| {
            section
                .get(&format!("{tag}.{kind}.{n}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| malformed(format!("missing {tag}.{kind}.{n}")))
        };
        m.push(get("m")?);
        v.push(get("v")?);
    }
    let cfg = AdamConfig {
        lr: num("lr")?,
        beta1: num("beta1")?,
        beta2: num("beta2")?,
        eps: num("eps")?,
    };
    AdamState::restore(store, ids, cfg, step, m, v)
}

/// Rebuilds a model from a checkpoint. Returns the stored run metadata too.
pub fn to_model(ckpt: &Checkpoint) -> Result<(SciModel, Value)> {
    let meta = &ckpt.meta;
    if meta.get("format").and_then(Value::as_str) != Some("sci-checkpoint") {
        return Err(malformed("not an sci checkpoint"));
    }
    let config: ModelConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or(Value::Null))
        .map_err(|e| malformed(format!("model config: {e}")))?;
    let labels: LabelSpace = serde_json::from_value(meta.get("labels").cloned().unwrap_or(Value::Null))
        .map_err(|e| malformed(format!("labels: {e}")))?;
    let mut model = SciModel::new(config, labels)?;

    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let found = ["encoders", "prompt_bank", "sim", "heads"]
            .iter()
            .filter_map(|s| ckpt.section(s).ok())
            .find_map(|s| s.get(&name))
            .ok_or_else(|| malformed(format!("missing parameter {name}")))?;
        let target = model.store.get_mut(id);
        if found.shape() != target.shape() {
            return Err(malformed(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                found.shape(),
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(found.data());
    }

    let tc = ckpt.section("text_cache")?;
    let get = |n: &str| tc.get(n).cloned().ok_or_else(|| malformed(format!("missing text_cache.{n}")));
    model.text_cache = Some(TextFeatureSet {
        f_id: get("f_id")?,
        f_clo: get("f_clo")?,
        f_proj: get("f_proj")?,
        f_ort: get("f_ort")?,
    });

    let opt = ckpt.section("optimizer")?;
    let optimizers = meta.get("optimizers").cloned().unwrap_or(Value::Null);
    if let Some(m) = optimizers.get("stage1") {
        model.optim_stage1 = Some(restore_adam(&model.store, "stage1", m, opt)?);
    }
    if let (Some(a), Some(b)) = (optimizers.get("stage2"), optimizers.get("stage2_cal")) {
        model.optim_stage2 = Some((
            restore_adam(&model.store, "stage2", a, opt)?,
            restore_adam(&model.store, "stage2_cal", b, opt)?,
        ));
    }
    Ok((model, meta.get("run").cloned().unwrap_or(Value::Null)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        Checkpoint {
            version: VERSION,
            meta: json!({"a": 1}),
            sections: vec![Section {
                name: "s".into(),
                arrays: vec![
                    ("x".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
                    ("scalar".into(), Tensor::scalar(7.0)),
                ],
            }],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = tiny();
        let b = c.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back.to_bytes(), b);
        assert_eq!(back.section("s").unwrap().get("x").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn version_and_truncation() {
        let mut b = tiny().to_bytes();
        b[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::VersionMismatch { expected: 1, found: 9 })
        ));
        let b = tiny().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 1]),
            Err(Error::MalformedCheckpoint(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::MalformedCheckpoint(_))));
    }
}
