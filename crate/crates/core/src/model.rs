//! The full model: encoders, prompt bank, SIM blocks and heads sharing one
//! parameter store.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, LrSchedule, ParamId, ParamStore};
use crate::encoders::{EncoderConfig, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::sim::{CalHead, IdHead, SimBlocks, SimConfig};
use crate::sse::{clo_pairing, compute_text_features, LabelSpace, PromptBank, SseConfig, TextFeatureSet};
use crate::synthdata::{Dataset, Split};

/// Which of the two modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub use_sse: bool,
    pub use_sim: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

impl Variant {
    pub const BASELINE: Variant = Variant {
        use_sse: false,
        use_sim: false,
    };
    pub const SSE: Variant = Variant {
        use_sse: true,
        use_sim: false,
    };
    pub const SIM: Variant = Variant {
        use_sse: false,
        use_sim: true,
    };
    pub const FULL: Variant = Variant {
        use_sse: true,
        use_sim: true,
    };
    pub const ALL: [Variant; 4] = [Self::BASELINE, Self::SSE, Self::SIM, Self::FULL];

    pub fn name(self) -> &'static str {
        match (self.use_sse, self.use_sim) {
            (false, false) => "baseline",
            (true, false) => "+sse",
            (false, true) => "+sim",
            (true, true) => "+sse+sim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sse: SseConfig,
    pub sim: SimConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            sse: SseConfig::default(),
            sim: SimConfig::default(),
            variant: Variant::FULL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sse.validate()?;
        self.sim.validate()
    }
}

/// Everything a training stage needs beyond the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SciModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub bank: PromptBank,
    pub sim: SimBlocks,
    pub id_head: IdHead,
    pub cal_head: CalHead,
    pub labels: LabelSpace,
    pub text_cache: Option<TextFeatureSet>,
    pub optim_stage1: Option<AdamState>,
    pub optim_stage2: Option<(AdamState, AdamState)>,
}

impl SciModel {
    /// Initialises every component from `config.encoder.seed`, each from
    /// its own random stream, and caches the initial text features.
    pub fn new(config: ModelConfig, labels: LabelSpace) -> Result<Self> {
        config.validate()?;
        if labels.num_pids() == 0 {
            return Err(Error::Data("no training identities".into()));
        }
        let enc = &config.encoder;
        let seed = enc.seed;
        let mut store = ParamStore::new();
        let mut text = TextEncoder::new(enc, &mut store);
        let mut visual = VisualEncoder::new(enc, &mut store);
        let bank = PromptBank::new(
            &mut store,
            labels.num_pids(),
            labels.num_clothes(),
            config.sse.context_len,
            enc.token_dim,
            seed,
        )?;
        let sim = SimBlocks::new(&mut store, enc.text_dim, &config.sim, seed);
        let id_head = IdHead::new(&mut store, labels.num_pids(), enc.text_dim, seed);
        let cal_head = CalHead::new(&mut store, &labels, enc.text_dim, config.sim.cal_tau, seed);
        text.set_frozen(&mut store, true);
        visual.set_frozen(&mut store, true);
        let mut model = Self {
            config,
            store,
            text,
            visual,
            bank,
            sim,
            id_head,
            cal_head,
            labels,
            text_cache: None,
            optim_stage1: None,
            optim_stage2: None,
        };
        model.text_cache = Some(compute_text_features(&model)?);
        Ok(model)
    }

    /// Model over the training split of `dataset`, checking image size.
    pub fn for_dataset(config: ModelConfig, dataset: &Dataset) -> Result<Self> {
        check_dataset(&config.encoder, dataset)?;
        Self::new(config, labels_of(dataset)?)
    }

    /// Class indices `(pid, clothes)` of the given samples.
    pub fn batch_labels(&self, dataset: &Dataset, indices: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut pids = Vec::with_capacity(indices.len());
        let mut clothes = Vec::with_capacity(indices.len());
        for i in indices {
            let s = dataset
                .samples
                .get(*i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            pids.push(
                self.labels
                    .pid_index(s.pid)
                    .ok_or_else(|| Error::Data(format!("pid {} not among training identities", s.pid)))?,
            );
            clothes.push(
                self.labels
                    .clothes_index(s.clothes_id)
                    .ok_or_else(|| Error::Data(format!("clothes id {} not among training outfits", s.clothes_id)))?,
            );
        }
        Ok((pids, clothes))
    }

    /// Parameters updated by the main stage-2 step.
    pub fn stage2_params(&self) -> Vec<ParamId> {
        let mut ids = self.visual.param_ids(&self.store);
        if self.config.variant.use_sim {
            ids.extend(self.sim.param_ids(&self.store));
        }
        ids.push(self.id_head.weight());
        ids
    }

    /// Text side: text encoder and prompt bank.
    pub fn text_side_params(&self) -> Vec<ParamId> {
        let mut ids = self.text.param_ids(&self.store);
        ids.extend(self.store.ids_with_prefix("prompt"));
        ids
    }

    pub fn prepare_stage1(&mut self) {
        self.text.set_frozen(&mut self.store, true);
        self.visual.set_frozen(&mut self.store, true);
        let bank = self.store.ids_with_prefix("prompt");
        self.store.set_requires_grad(&bank, true);
    }

    pub fn prepare_stage2(&mut self) {
        self.text.set_frozen(&mut self.store, true);
        let bank = self.store.ids_with_prefix("prompt");
        self.store.set_requires_grad(&bank, false);
        self.visual.set_frozen(&mut self.store, false);
    }
}

/// Training identities and outfits of a dataset.
pub fn labels_of(dataset: &Dataset) -> Result<LabelSpace> {
    let pairs: Vec<(u32, u32)> = dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| (s.pid, s.clothes_id))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data("dataset has no training samples".into()));
    }
    clo_pairing(&pairs)
}

pub fn check_dataset(enc: &EncoderConfig, dataset: &Dataset) -> Result<()> {
    if dataset.height != enc.height || dataset.width != enc.width {
        return Err(Error::contract(format!(
            "dataset images are {}x{} but the encoder expects {}x{}",
            dataset.height, dataset.width, enc.height, enc.width
        )));
    }
    Ok(())
}
