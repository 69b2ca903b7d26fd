//! Seeded synthetic cloth-changing dataset.
//!
//! Every image is a sum of independent factors:
//!
//! ```text
//! image = id_strength * B_id(pid) + clo_strength * B_clo(outfit) + tint(camera) + noise
//! ```
//!
//! Identity patterns live on the head and leg bands, clothing patterns on the
//! torso band, and each camera adds a constant per-channel tint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "images.f32le";

/// How outfits are distributed over cameras.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Every outfit is seen by every camera.
    Ltcc,
    /// Cameras 0 and 1 share outfit 0; every later camera sees a different outfit.
    Prcc,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ltcc" => Ok(Preset::Ltcc),
            "prcc" => Ok(Preset::Prcc),
            other => Err(Error::config("synth.preset", format!("unknown preset `{other}` (ltcc, prcc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_pids: usize,
    /// Identities `0..num_train_pids` form the training split.
    pub num_train_pids: usize,
    pub outfits_per_pid: usize,
    pub cams: usize,
    pub images_per_group: usize,
    pub height: usize,
    pub width: usize,
    pub id_signal_strength: f32,
    pub clo_signal_strength: f32,
    pub camera_tint: f32,
    pub noise_sigma: f32,
    pub preset: Preset,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_pids: 8,
            num_train_pids: 4,
            outfits_per_pid: 3,
            cams: 3,
            images_per_group: 4,
            height: 32,
            width: 16,
            id_signal_strength: 0.6,
            clo_signal_strength: 0.8,
            camera_tint: 0.3,
            noise_sigma: 0.1,
            preset: Preset::Ltcc,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("synth.num_pids", self.num_pids),
            ("synth.outfits_per_pid", self.outfits_per_pid),
            ("synth.cams", self.cams),
            ("synth.images_per_group", self.images_per_group),
            ("synth.height", self.height),
            ("synth.width", self.width),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.num_train_pids > self.num_pids {
            return Err(Error::config("synth.num_train_pids", "must not exceed synth.num_pids"));
        }
        for (field, v) in [
            ("synth.id_signal_strength", self.id_signal_strength),
            ("synth.clo_signal_strength", self.clo_signal_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        for (field, v) in [
            ("synth.noise_sigma", self.noise_sigma),
            ("synth.camera_tint", self.camera_tint),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Outfit index worn by every identity in front of `cam`, or `None` when
    /// all outfits appear there.
    fn outfit_for_camera(&self, cam: usize) -> Option<usize> {
        match self.preset {
            Preset::Ltcc => None,
            Preset::Prcc if self.outfits_per_pid == 1 || cam < 2 => Some(0),
            Preset::Prcc => Some(1 + (cam - 2) % (self.outfits_per_pid - 1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H x W x 3`, row-major.
    pub image: Tensor,
    pub pid: u32,
    /// Globally unique outfit id.
    pub clothes_id: u32,
    pub camera_id: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// Generator settings, when the dataset was synthesised.
    pub config: Option<SynthConfig>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|i| self.samples[*i].split == split)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

fn band_pattern(
    h: usize,
    w: usize,
    rows: &[std::ops::Range<usize>],
    r: &mut rng::Rng,
) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut p = vec![0.0; h * w * 3];
    for band in rows {
        for y in band.clone() {
            for x in 0..w {
                for c in 0..3 {
                    p[(y * w + x) * 3 + c] = normal.sample(r);
                }
            }
        }
    }
    p
}

/// Generates the dataset described by `config`. Same config, same bytes.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let head = 0..h / 4;
    let torso = h / 4..(5 * h) / 8;
    let legs = (5 * h) / 8..h;

    let mut id_rng = rng::stream(config.seed, "synth.identity");
    let id_patterns: Vec<Vec<f32>> = (0..config.num_pids)
        .map(|_| band_pattern(h, w, &[head.clone(), legs.clone()], &mut id_rng))
        .collect();
    let mut clo_rng = rng::stream(config.seed, "synth.clothing");
    let clo_patterns: Vec<Vec<f32>> = (0..config.num_pids * config.outfits_per_pid)
        .map(|_| band_pattern(h, w, std::slice::from_ref(&torso), &mut clo_rng))
        .collect();
    let mut cam_rng = rng::stream(config.seed, "synth.camera");
    let tint_dist = Normal::new(0.0f32, config.camera_tint).expect("validated tint");
    let tints: Vec<[f32; 3]> = (0..config.cams)
        .map(|_| {
            [
                tint_dist.sample(&mut cam_rng),
                tint_dist.sample(&mut cam_rng),
                tint_dist.sample(&mut cam_rng),
            ]
        })
        .collect();

    let mut noise_rng = rng::stream(config.seed, "synth.noise");
    let noise = Normal::new(0.0f32, config.noise_sigma).expect("validated sigma");
    let mut samples = Vec::new();
    for pid in 0..config.num_pids {
        let train = pid < config.num_train_pids;
        for outfit in 0..config.outfits_per_pid {
            let clothes_id = pid * config.outfits_per_pid + outfit;
            for cam in 0..config.cams {
                if config.outfit_for_camera(cam).is_some_and(|o| o != outfit) {
                    continue;
                }
                for n in 0..config.images_per_group {
                    let mut data = vec![0.0f32; h * w * 3];
                    for (i, px) in data.iter_mut().enumerate() {
                        *px = config.id_signal_strength * id_patterns[pid][i]
                            + config.clo_signal_strength * clo_patterns[clothes_id][i]
                            + tints[cam][i % 3];
                        if config.noise_sigma > 0.0 {
                            *px += noise.sample(&mut noise_rng);
                        }
                    }
                    let split = match (train, n) {
                        (true, _) => Split::Train,
                        (false, 0) => Split::Query,
                        (false, _) => Split::Gallery,
                    };
                    samples.push(Sample {
                        image: Tensor::new(vec![h, w, 3], data)?,
                        pid: pid as u32,
                        clothes_id: clothes_id as u32,
                        camera_id: cam as u32,
                        split,
                    });
                }
            }
        }
    }
    Ok(Dataset {
        height: h,
        width: w,
        config: Some(config.clone()),
        samples,
    })
}

/// `P` identities x `K` instances, as indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub pids: Vec<u32>,
    pub indices: Vec<usize>,
}

/// Training-split index grouped by identity.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_pid: BTreeMap<u32, Vec<usize>>,
}

impl PkSampler {
    pub fn new(dataset: &Dataset) -> Self {
        let mut by_pid: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.split == Split::Train {
                by_pid.entry(s.pid).or_default().push(i);
            }
        }
        Self { by_pid }
    }

    pub fn num_pids(&self) -> usize {
        self.by_pid.len()
    }

    pub fn num_samples(&self) -> usize {
        self.by_pid.values().map(Vec::len).sum()
    }

    /// Draws `p` distinct identities uniformly and `k` samples of each,
    /// without replacement unless an identity has fewer than `k` samples.
    pub fn sample<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> Result<PkBatch> {
        if p == 0 || k == 0 {
            return Err(Error::contract("pk_sample needs P >= 1 and K >= 1"));
        }
        if p > self.by_pid.len() {
            return Err(Error::contract(format!(
                "pk_sample asked for {p} identities, only {} available",
                self.by_pid.len()
            )));
        }
        let pids: Vec<u32> = self.by_pid.keys().copied().collect();
        let mut chosen: Vec<u32> = index::sample(rng, pids.len(), p)
            .into_iter()
            .map(|i| pids[i])
            .collect();
        chosen.sort_unstable();
        let mut indices = Vec::with_capacity(p * k);
        for pid in &chosen {
            let pool = &self.by_pid[pid];
            if pool.len() >= k {
                indices.extend(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
            } else {
                indices.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        Ok(PkBatch {
            pids: chosen,
            indices,
        })
    }
}

pub fn pk_sample<R: Rng + ?Sized>(dataset: &Dataset, p: usize, k: usize, rng: &mut R) -> Result<PkBatch> {
    PkSampler::new(dataset).sample(p, k, rng)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    channels: usize,
    num_samples: usize,
    config: Option<SynthConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    pid: u32,
    clothes_id: u32,
    camera_id: u32,
    split: Split,
    offset: u64,
}

/// Writes `manifest.json` and `images.f32le` under `dir`.
///
/// The manifest is a single JSON object whose `samples` array holds one
/// record per line; the blob is every image back to back as little-endian
/// f32, `H x W x 3` row-major.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = ManifestHeader {
        format: "sci-dataset".into(),
        version: FORMAT_VERSION,
        height: dataset.height,
        width: dataset.width,
        channels: 3,
        num_samples: dataset.samples.len(),
        config: dataset.config.clone(),
    };
    let per_image = (dataset.height * dataset.width * 3 * 4) as u64;
    let mut text = serde_json::to_string(&header).expect("manifest header serializes");
    text.pop();
    text.push_str(",\n\"samples\": [\n");
    let mut blob = Vec::with_capacity(dataset.samples.len() * per_image as usize);
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.image.shape() != [dataset.height, dataset.width, 3] {
            return Err(Error::Data(format!("sample {i} has image shape {:?}", s.image.shape())));
        }
        let rec = ManifestRecord {
            pid: s.pid,
            clothes_id: s.clothes_id,
            camera_id: s.camera_id,
            split: s.split,
            offset: i as u64 * per_image,
        };
        text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        text.push_str(if i + 1 < dataset.samples.len() { ",\n" } else { "\n" });
        for x in s.image.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    text.push_str("]}\n");
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    let blob_path = dir.join(BLOB_FILE);
    let mut f = fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    header: ManifestHeader,
    samples: Vec<ManifestRecord>,
}

/// Reads only the manifest's version field, so a version bump is reported
/// as such rather than as a parse failure.
fn manifest_version(text: &str) -> Option<u32> {
    let v: serde_json::Value = serde_json::from_str(text).ok()?;
    v.get("version")?.as_u64().map(|v| v as u32)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    if let Some(found) = manifest_version(&text) {
        if found != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found,
            });
        }
    }
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    let hdr = &manifest.header;
    if hdr.format != "sci-dataset" || hdr.channels != 3 {
        return Err(Error::MalformedManifest(format!(
            "unexpected format `{}` with {} channels",
            hdr.format, hdr.channels
        )));
    }
    if hdr.num_samples != manifest.samples.len() {
        return Err(Error::MalformedManifest(format!(
            "header declares {} samples, {} records present",
            hdr.num_samples,
            manifest.samples.len()
        )));
    }
    let numel = hdr.height * hdr.width * 3;
    let per_image = (numel * 4) as u64;
    let blob_path = dir.join(BLOB_FILE);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = per_image * hdr.num_samples as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::BlobLength {
            expected,
            actual: bytes.len() as u64,
        });
    }

    let mut samples = Vec::with_capacity(hdr.num_samples);
    for (i, rec) in manifest.samples.iter().enumerate() {
        if rec.offset != i as u64 * per_image {
            return Err(Error::MalformedManifest(format!(
                "record {i} has offset {} (expected {})",
                rec.offset,
                i as u64 * per_image
            )));
        }
        let start = rec.offset as usize;
        let data = bytes[start..start + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        samples.push(Sample {
            image: Tensor::new(vec![hdr.height, hdr.width, 3], data)?,
            pid: rec.pid,
            clothes_id: rec.clothes_id,
            camera_id: rec.camera_id,
            split: rec.split,
        });
    }
    Ok(Dataset {
        height: hdr.height,
        width: hdr.width,
        config: hdr.config.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_counts() {
        let d = generate(&SynthConfig::default()).unwrap();
        assert_eq!(d.len(), 288);
        assert_eq!(d.count(Split::Train), 4 * 3 * 3 * 4);
        assert_eq!(d.count(Split::Query), 4 * 3 * 3);
        assert_eq!(d.count(Split::Gallery), 4 * 3 * 3 * 3);
    }

    #[test]
    fn degenerate_factors_give_identical_images_across_outfits() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            clo_signal_strength: 0.0,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        for a in &d.samples {
            for b in &d.samples {
                if a.pid == b.pid && a.camera_id == b.camera_id {
                    assert_eq!(a.image, b.image);
                }
            }
        }
    }

    #[test]
    fn clothes_belong_to_one_pid_and_splits_are_disjoint() {
        let d = generate(&SynthConfig::default()).unwrap();
        let mut owner = BTreeMap::new();
        for s in &d.samples {
            assert_eq!(*owner.entry(s.clothes_id).or_insert(s.pid), s.pid);
        }
        let train: std::collections::BTreeSet<u32> = d
            .samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.pid)
            .collect();
        assert!(d
            .samples
            .iter()
            .filter(|s| s.split != Split::Train)
            .all(|s| !train.contains(&s.pid)));
    }

    #[test]
    fn prcc_preset_ties_outfits_to_cameras() {
        let cfg = SynthConfig {
            preset: Preset::Prcc,
            outfits_per_pid: 2,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        for s in &d.samples {
            let outfit = s.clothes_id as usize % 2;
            let expected = if s.camera_id < 2 { 0 } else { 1 };
            assert_eq!(outfit, expected);
        }
        assert_eq!(d.len(), 8 * 3 * 4);
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = SynthConfig {
            clo_signal_strength: 1.5,
            ..Default::default()
        };
        match generate(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "synth.clo_signal_strength"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pk_batch_structure() {
        let d = generate(&SynthConfig::default()).unwrap();
        let sampler = PkSampler::new(&d);
        let mut r = rng::stream(3, "pk");
        let b = sampler.sample(1, 1, &mut r).unwrap();
        assert_eq!(b.indices.len(), 1);
        let b = sampler.sample(4, 4, &mut r).unwrap();
        let mut hist = BTreeMap::new();
        for i in &b.indices {
            assert_eq!(d.samples[*i].split, Split::Train);
            *hist.entry(d.samples[*i].pid).or_insert(0) += 1;
        }
        assert_eq!(hist.len(), 4);
        assert!(hist.values().all(|c| *c == 4));
        assert!(sampler.sample(5, 1, &mut r).is_err());
    }

    #[test]
    fn pk_with_replacement_when_pool_small() {
        let cfg = SynthConfig {
            outfits_per_pid: 1,
            cams: 1,
            images_per_group: 2,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        let mut r = rng::stream(0, "pk");
        let b = pk_sample(&d, 2, 5, &mut r).unwrap();
        assert_eq!(b.indices.len(), 10);
    }
}
