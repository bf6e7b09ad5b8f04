//! Single-file checkpoints: safetensors tensors plus a JSON header entry holding
//! the resolved config and training position.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::{Discriminator, Generator, ParamStore};

pub const FORMAT_TAG: &str = "mpsenet-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "mpsenet";

pub const GENERATOR: &str = "generator";
pub const DISCRIMINATOR: &str = "discriminator";
pub const GENERATOR_OPTIM: &str = "optim.generator";
pub const DISCRIMINATOR_OPTIM: &str = "optim.discriminator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    /// Position of the next batch to train on.
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub global_step: u64,
    pub generator_optim_steps: u64,
    pub discriminator_optim_steps: u64,
    #[serde(default)]
    pub best_oracle_score: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(config: RunConfig) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            config,
            epoch: 0,
            batch_in_epoch: 0,
            global_step: 0,
            generator_optim_steps: 0,
            discriminator_optim_steps: 0,
            best_oracle_score: None,
        }
    }
}

/// Tensors are keyed `<group>/<name>`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_group(&mut self, group: &str, values: BTreeMap<String, Tensor>) {
        for (k, v) in values {
            self.tensors.insert(format!("{group}/{k}"), v);
        }
    }

    pub fn group(&self, group: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{group}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta)?;
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        let tensors: Vec<(&str, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.as_str(), t.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize(tensors, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn decode(bytes: &[u8], device: &Device) -> Result<Self> {
        let st = safetensors::SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta_text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta_text).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if meta.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("unexpected format tag {:?}", meta.format)));
        }
        if meta.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                meta.version
            )));
        }
        meta.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = candle_core::safetensors::Load::load(&view, device)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        // write then rename so a crash never leaves a truncated checkpoint behind
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, device)
    }

    /// Rebuilds the generator described by the embedded config and loads its weights.
    pub fn generator(&self, device: &Device) -> Result<Generator> {
        let g = Generator::new(&self.meta.config.model, self.meta.config.seed, DType::F32, device)?;
        restore_exact(g.params(), &self.group(GENERATOR), GENERATOR)?;
        Ok(g)
    }

    pub fn discriminator(&self, device: &Device) -> Result<Discriminator> {
        let d = Discriminator::new(self.meta.config.seed, DType::F32, device)?;
        restore_exact(d.params(), &self.group(DISCRIMINATOR), DISCRIMINATOR)?;
        Ok(d)
    }
}

/// Restores every parameter and buffer of `store`, refusing missing or extra entries.
pub fn restore_exact(store: &ParamStore, values: &BTreeMap<String, Tensor>, what: &str) -> Result<()> {
    let expected: BTreeSet<String> = store.snapshot()?.into_keys().collect();
    let found: BTreeSet<String> = values.keys().cloned().collect();
    if let Some(missing) = expected.difference(&found).next() {
        return Err(Error::Checkpoint(format!("{what}: missing tensor {missing}")));
    }
    if let Some(extra) = found.difference(&expected).next() {
        return Err(Error::Checkpoint(format!("{what}: unexpected tensor {extra}")));
    }
    store.restore(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            base_channels: 8,
            n_conformers: 1,
            conformer_heads: 2,
            ..Default::default()
        };
        cfg
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let g = Generator::new(&cfg.model, 3, DType::F32, &Device::Cpu).unwrap();
        let mut meta = CheckpointMeta::new(cfg);
        meta.global_step = 17;
        meta.best_oracle_score = Some(0.25);
        let mut ck = Checkpoint::new(meta.clone());
        ck.insert_group(GENERATOR, g.params().snapshot().unwrap());
        let back = Checkpoint::decode(&ck.encode().unwrap(), &Device::Cpu).unwrap();
        assert_eq!(back.meta, meta);
        let g2 = back.generator(&Device::Cpu).unwrap();
        let (a, b) = (g.params().snapshot().unwrap(), g2.params().snapshot().unwrap());
        for (k, t) in &a {
            assert_eq!(flat(t), flat(&b[k]), "{k}");
        }
    }

    #[test]
    fn corrupt_or_foreign_files_are_rejected() {
        let dev = Device::Cpu;
        assert!(Checkpoint::decode(b"", &dev).is_err());
        assert!(Checkpoint::decode(&[0xff; 64], &dev).is_err());
        let plain = safetensors::serialize(Vec::<(&str, Tensor)>::new(), None).unwrap();
        assert!(matches!(Checkpoint::decode(&plain, &dev), Err(Error::Checkpoint(_))));
        let mut meta = CheckpointMeta::new(small());
        meta.version = 99;
        let bytes = Checkpoint::new(meta).encode().unwrap();
        let msg = Checkpoint::decode(&bytes, &dev).unwrap_err().to_string();
        assert!(msg.contains("version"), "{msg}");
        // a generator checkpoint with a tensor missing
        let cfg = small();
        let g = Generator::new(&cfg.model, 3, DType::F32, &dev).unwrap();
        let mut snap = g.params().snapshot().unwrap();
        snap.pop_first();
        let mut ck = Checkpoint::new(CheckpointMeta::new(cfg));
        ck.insert_group(GENERATOR, snap);
        let back = Checkpoint::decode(&ck.encode().unwrap(), &dev).unwrap();
        assert!(back.generator(&dev).unwrap_err().to_string().contains("missing"));
    }
}
