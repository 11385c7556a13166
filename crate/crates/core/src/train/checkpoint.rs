//! Binary checkpoints: adapter-only or full (base, adapter, optimizer).
//!
//! Layout, little-endian: magic `ZADP`, version u16, kind u8, the 32-byte
//! config digest, tensor count u32, then per tensor: name length u16, name
//! bytes, rank u8, extents u32 each, payload f32 each.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::{AdapterState, InitMode};
use crate::error::{Error, Result};
use crate::model::{BaseWeights, ModelConfig};
use crate::multimodal::{ByteReader, ProjectionNet};
use crate::params::Parameters;
use crate::tensor::Tensor;

use super::optim::AdamW;

const MAGIC: &[u8; 4] = b"ZADP";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    AdapterOnly = 0,
    Full = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// SHA-256 of the model config's canonical text.
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn owned(params: &dyn Parameters<f32>) -> Vec<(String, Tensor<f32>)> {
    params.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

impl Checkpoint {
    /// Prompts, gates (gated adapters only) and the projection if any.
    pub fn adapter(cfg: &ModelConfig, adapter: &AdapterState<f32>) -> Self {
        Self {
            kind: CheckpointKind::AdapterOnly,
            digest: cfg.digest(),
            tensors: owned(adapter),
        }
    }

    /// Base weights, adapter and, when given, optimizer moments and step.
    pub fn full(cfg: &ModelConfig, base: &BaseWeights<f32>, adapter: &AdapterState<f32>, opt: Option<&AdamW<f32>>) -> Self {
        let mut tensors = owned(base);
        tensors.extend(owned(adapter));
        if let Some(opt) = opt {
            tensors.push(("opt.step".into(), Tensor::scalar(opt.step as f32)));
            for (name, (m, v)) in &opt.moments {
                tensors.push((format!("opt.m.{name}"), m.clone()));
                tensors.push((format!("opt.v.{name}"), v.clone()));
            }
        }
        Self {
            kind: CheckpointKind::Full,
            digest: cfg.digest(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, expected ZADP"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => CheckpointKind::AdapterOnly,
            1 => CheckpointKind::Full,
            k => return Err(r.error_at(6, format!("unknown checkpoint kind {k}"))),
        };
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos();
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error_at(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error_at(at, "tensor size overflows"))?;
            let data = r.f32s(n)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Ok(Self { kind, digest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails with an incompatibility error unless written for `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.digest == cfg.digest() {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "checkpoint digest {} does not match config digest {}",
                hex::encode(self.digest),
                hex::encode(cfg.digest())
            )))
        }
    }

    fn map(&self) -> BTreeMap<&str, &Tensor<f32>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn adapter_state(&self, cfg: &ModelConfig) -> Result<AdapterState<f32>> {
        self.check(cfg)?;
        let map = self.map();
        let mode = if map.contains_key("adapter.gates") {
            InitMode::ZeroInit
        } else {
            InitMode::RandInit
        };
        let mut adapter = AdapterState::init(cfg, mode, 0)?;
        let stages = (0..).take_while(|i| map.contains_key(format!("proj.{i}.weight").as_str())).count();
        if stages > 0 {
            let widths: Vec<usize> = (0..stages).map(|i| map[format!("proj.{i}.weight").as_str()].cols()).collect();
            let in_width = map["proj.0.weight"].rows();
            let hidden = &widths[..stages - 1];
            adapter.projection = Some(ProjectionNet::init(in_width, hidden, widths[stages - 1], 0));
        }
        fill(&mut adapter, &map)?;
        adapter.check_compatible(cfg)?;
        Ok(adapter)
    }

    pub fn base_weights(&self, cfg: &ModelConfig) -> Result<BaseWeights<f32>> {
        self.check(cfg)?;
        if self.kind != CheckpointKind::Full {
            return Err(Error::Incompatible("adapter-only checkpoint has no base weights".into()));
        }
        let mut base = BaseWeights::init(cfg, 0)?;
        fill(&mut base, &self.map())?;
        Ok(base)
    }

    /// Base weights for any adapter geometry: the digest is skipped, since
    /// `K` and `L` do not touch the base, but every shape must match `cfg`.
    pub fn shared_base(&self, cfg: &ModelConfig) -> Result<BaseWeights<f32>> {
        if self.kind != CheckpointKind::Full {
            return Err(Error::Incompatible("adapter-only checkpoint has no base weights".into()));
        }
        let mut base = BaseWeights::init(cfg, 0)?;
        fill(&mut base, &self.map())?;
        Ok(base)
    }

    /// Optimizer state of a full checkpoint, if it was saved.
    pub fn optimizer(&self, weight_decay: f64) -> Option<AdamW<f32>> {
        let step = self.get("opt.step")?.data()[0] as u64;
        let mut moments = BTreeMap::new();
        for (name, m) in &self.tensors {
            if let Some(param) = name.strip_prefix("opt.m.") {
                let v = self.get(&format!("opt.v.{param}"))?;
                moments.insert(param.to_string(), (m.clone(), v.clone()));
            }
        }
        Some(AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step,
            moments,
        })
    }
}

fn fill(params: &mut dyn Parameters<f32>, map: &BTreeMap<&str, &Tensor<f32>>) -> Result<()> {
    for (name, slot) in params.named_mut() {
        let t = map
            .get(name.as_str())
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Incompatible(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = (*t).clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn trained_like(cfg: &ModelConfig) -> AdapterState<f32> {
        let mut a = AdapterState::init(cfg, InitMode::ZeroInit, 3).unwrap();
        a.gates = Tensor::randn(a.gates.shape(), 0.1, &mut Rng::new(1));
        a
    }

    #[test]
    fn adapter_round_trip_is_byte_identical() {
        let cfg = ModelConfig::toy();
        let a = trained_like(&cfg);
        let bytes = Checkpoint::adapter(&cfg, &a).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.adapter_state(&cfg).unwrap(), a);
        // Header, tensor headers, then 4 bytes per value.
        let values = 4 * 5 * 64 + 4 * 4;
        let headers = 4 + 2 + 1 + 32 + 4 + 4 * (2 + 17 + 1 + 8) + (2 + 13 + 1 + 8);
        assert_eq!(bytes.len(), 4 * values + headers);
    }

    #[test]
    fn rand_init_and_projection_are_recovered() {
        let cfg = ModelConfig::toy();
        let a = AdapterState::<f32>::init(&cfg, InitMode::RandInit, 2)
            .unwrap()
            .with_projection(ProjectionNet::default_for(64, 4));
        let back = Checkpoint::from_bytes(&Checkpoint::adapter(&cfg, &a).to_bytes())
            .unwrap()
            .adapter_state(&cfg)
            .unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn mismatched_config_is_incompatible() {
        let cfg = ModelConfig::toy();
        let ck = Checkpoint::adapter(&cfg, &trained_like(&cfg));
        let other = ModelConfig {
            dim: 32,
            ffn_hidden: 64,
            ..ModelConfig::toy()
        };
        assert!(matches!(ck.adapter_state(&other), Err(Error::Incompatible(_))));
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let cfg = ModelConfig::toy();
        let bytes = Checkpoint::adapter(&cfg, &trained_like(&cfg)).to_bytes();
        for cut in [0, 3, 10, 50, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Parse { .. })));
        }
    }

    #[test]
    fn full_round_trip_restores_everything() {
        let cfg = ModelConfig::toy();
        let base = BaseWeights::<f32>::init(&cfg, 8).unwrap();
        let a = trained_like(&cfg);
        let mut opt = AdamW::new(&a, &a.trainable_mask(), 0.02);
        opt.step = 7;
        let ck = Checkpoint::full(&cfg, &base, &a, Some(&opt));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.base_weights(&cfg).unwrap(), base);
        assert_eq!(back.adapter_state(&cfg).unwrap(), a);
        assert_eq!(back.optimizer(0.02).unwrap(), opt);
        assert!(Checkpoint::adapter(&cfg, &a).base_weights(&cfg).is_err());
    }
}
