//! The assembled generator: every trainable component in one parameter
//! store, the checkpoint archive, and the image-to-parts pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::{points_tensor, PartCodec, TokenMatrix};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::flow::{sample, BackboneShape, FlowBackbone, Guidance};
use crate::gate::{select_active, GateHead};
use crate::nn::{normal_tensor, stream_rng, streams, ParamStore};
use crate::proto::PrototypeBank;
use crate::slots::{pack_slots, SlotMask};
use crate::synth::{CompositeObject, ConditionImage, PartPointCloud};
use crate::view::{images_tensor, ViewEncoder};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SLOTCKPT";
pub const E_NULL: &str = "slots.e_null";

/// Furthest training stage a set of weights has completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Codec,
    Warmup,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    stage: Stage,
    step: u64,
    config: Config,
    tensors: Vec<TensorEntry>,
}

/// Named f32 tensors with the configuration and progress they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub stage: Stage,
    pub step: u64,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    /// Archive layout: magic, `u32` version, `u64` index length, JSON index,
    /// then the little-endian f32 payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, (shape, data)) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: shape.clone(),
                byte_offset: payload.len(),
                byte_len: data.len() * 4,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = serde_json::to_vec(&Index {
            format_version: CHECKPOINT_VERSION,
            stage: self.stage,
            step: self.step,
            config: self.config.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + index.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let index_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let index_end = 20usize
            .checked_add(index_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("index extends past the end of the file".into()))?;
        let index: Index = serde_json::from_slice(&bytes[20..index_end])
            .map_err(|e| Error::Checkpoint(format!("unreadable index: {e}")))?;
        if index.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: index.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        index.config.validate()?;
        let payload = &bytes[index_end..];
        let mut tensors = BTreeMap::new();
        for e in index.tensors {
            let bad = |reason: String| Error::CheckpointTensor {
                tensor: e.name.clone(),
                reason,
            };
            if e.dtype != "f32" {
                return Err(bad(format!("unsupported dtype `{}`", e.dtype)));
            }
            let expected = e.shape.iter().product::<usize>() * 4;
            if e.byte_len != expected {
                return Err(bad(format!("payload length {} does not match shape {:?}", e.byte_len, e.shape)));
            }
            let end = e.byte_offset.checked_add(e.byte_len).filter(|&end| end <= payload.len());
            let Some(end) = end else {
                return Err(bad(format!(
                    "payload truncated: needs bytes {}..{}, archive has {}",
                    e.byte_offset,
                    e.byte_offset + e.byte_len,
                    payload.len()
                )));
            };
            let data = payload[e.byte_offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(e.name.clone(), (e.shape, data)).is_some() {
                return Err(bad("duplicate tensor name".into()));
            }
        }
        Ok(Self {
            config: index.config,
            stage: index.stage,
            step: index.step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// One generated object.
#[derive(Debug, Clone)]
pub struct Generation {
    pub alpha: Vec<f32>,
    pub active: Vec<usize>,
    pub parts: Vec<PartPointCloud>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub codec: PartCodec,
    pub view: ViewEncoder,
    pub gate: GateHead,
    pub bank: PrototypeBank,
    pub backbone: FlowBackbone,
    pub e_null: Var,
    pub stage: Stage,
    pub step: u64,
}

impl Model {
    /// Freshly initialised f32 model.
    pub fn new(config: &Config) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: &Config, dtype: DType) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut store = ParamStore::new(dtype);
        let mut rng = stream_rng(cfg.seed, streams::INIT);
        let codec = PartCodec::new(
            &mut store,
            cfg.tokens_per_part,
            cfg.latent_dim,
            cfg.points_per_part,
            cfg.codec_decoder_hidden,
            &mut rng,
        )?;
        let view = ViewEncoder::new(&mut store, cfg.render_size, cfg.view_hidden, cfg.feature_dim, &mut rng)?;
        let gate = GateHead::new(&mut store, cfg.feature_dim, cfg.gate_hidden, cfg.p_max, &mut rng)?;
        let bank = PrototypeBank::new(
            &mut store,
            cfg.num_prototypes,
            cfg.latent_dim,
            cfg.prototype_init_std,
            &mut rng,
        )?;
        let backbone = FlowBackbone::new(&mut store, backbone_shape(cfg), &mut rng)?;
        let e_null = store.normal(
            E_NULL,
            &[cfg.latent_dim],
            1.0,
            &mut stream_rng(cfg.seed, streams::NULL_EMBEDDING),
        )?;
        Ok(Self {
            config: cfg.clone(),
            store,
            codec,
            view,
            gate,
            bank,
            backbone,
            e_null,
            stage: Stage::Init,
            step: 0,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        for (name, var) in self.store.iter() {
            let t = var.as_tensor().to_dtype(DType::F32)?;
            let data = t.flatten_all()?.to_vec1::<f32>()?;
            tensors.insert(name.clone(), (t.dims().to_vec(), data));
        }
        Ok(Checkpoint {
            config: self.config.clone(),
            stage: self.stage,
            step: self.step,
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_checkpoint_with(ckpt, &ckpt.config)
    }

    /// Loads checkpoint tensors into a model built from `config`; every
    /// tensor must exist with the shape `config` implies.
    pub fn from_checkpoint_with(ckpt: &Checkpoint, config: &Config) -> Result<Self> {
        let mut model = Self::new(config)?;
        for (name, var) in model.store.iter() {
            let (shape, data) = ckpt.tensors.get(name).ok_or_else(|| Error::CheckpointTensor {
                tensor: name.clone(),
                reason: "missing from the archive".into(),
            })?;
            if shape.as_slice() != var.dims() {
                return Err(Error::ShapeMismatch {
                    tensor: name.clone(),
                    expected: var.dims().to_vec(),
                    found: shape.clone(),
                });
            }
            var.set(&Tensor::from_vec(data.clone(), shape.as_slice(), &Device::Cpu)?)?;
        }
        if let Some(extra) = ckpt.tensors.keys().find(|k| model.store.get(k).is_none()) {
            return Err(Error::CheckpointTensor {
                tensor: extra.clone(),
                reason: "not part of this model".into(),
            });
        }
        model.stage = ckpt.stage;
        model.step = ckpt.step;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Canonical latent slots `(P, K, C)` and mask for each object.
    pub fn encode_objects(&self, objects: &[CompositeObject]) -> Result<Vec<(Tensor, SlotMask)>> {
        let p_max = self.config.p_max;
        let e_null = self.e_null.as_tensor().detach();
        let mut out = Vec::with_capacity(objects.len());
        for obj in objects {
            if obj.n_obj() > p_max {
                return Err(Error::Capacity {
                    parts: obj.n_obj(),
                    p_max,
                });
            }
            let clouds: Vec<&[[f32; 3]]> = obj.parts.iter().map(|p| p.points.as_slice()).collect();
            for c in &clouds {
                if c.len() != self.codec.points {
                    return Err(Error::Object {
                        object_id: obj.object_id.clone(),
                        reason: format!("part has {} points, codec expects {}", c.len(), self.codec.points),
                    });
                }
            }
            let tokens = self.codec.encode(&points_tensor(&clouds, self.dtype())?)?.detach();
            let parts = (0..obj.n_obj())
                .map(|i| Ok(TokenMatrix(tokens.get(i)?)))
                .collect::<Result<Vec<_>>>()?;
            out.push(pack_slots(&parts, p_max, &e_null)?);
        }
        Ok(out)
    }

    /// Image features `(B, D)`.
    pub fn features(&self, images: &[&ConditionImage]) -> Result<Tensor> {
        self.view.forward(&images_tensor(images, self.config.render_size, self.dtype())?)
    }

    /// Gate activations per image.
    pub fn gate_alpha(&self, images: &[&ConditionImage]) -> Result<Vec<Vec<f32>>> {
        let alpha = self.gate.forward(&self.features(images)?)?.detach();
        Ok(alpha.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    /// Part count used in place of the gate when it is disabled.
    pub fn fixed_part_count(&self) -> usize {
        self.config
            .fixed_part_count
            .unwrap_or(self.config.min_parts.max(1))
            .min(self.config.p_max)
    }

    /// Slots to generate for each activation vector.
    pub fn active_sets(&self, alpha: &[Vec<f32>], tau: f64) -> Result<Vec<Vec<usize>>> {
        if self.config.disable_gate {
            let n = self.fixed_part_count();
            return Ok(alpha.iter().map(|_| (0..n).collect()).collect());
        }
        alpha.iter().map(|a| select_active(a, tau)).collect()
    }

    /// Image to parts: gate, slot selection, flow sampling and decoding.
    pub fn generate_batch(
        &self,
        images: &[&ConditionImage],
        seeds: &[u64],
        steps: usize,
        tau: f64,
    ) -> Result<Vec<Generation>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.features(images)?.detach();
        let alpha = self.gate.forward(&c)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let active = self.active_sets(&alpha, tau)?;
        let guidance = Guidance {
            bank: &self.bank,
            beta: self.config.beta,
        };
        let guidance = (!self.config.disable_bank).then_some(&guidance);
        let z = sample(
            &self.backbone,
            guidance,
            &active,
            &c,
            steps,
            seeds,
            self.e_null.as_tensor(),
            (self.config.p_max, self.config.tokens_per_part),
        )?;
        let mut out = Vec::with_capacity(images.len());
        for (b, (alpha, active)) in alpha.into_iter().zip(active).enumerate() {
            let slots = z.get(b)?;
            let mut parts = Vec::with_capacity(active.len());
            for &i in &active {
                let mut part = self.codec.decode_part(&TokenMatrix(slots.get(i)?))?;
                part.part_index = i;
                parts.push(part);
            }
            out.push(Generation { alpha, active, parts });
        }
        Ok(out)
    }

    pub fn generate(&self, img: &ConditionImage, seed: u64) -> Result<Generation> {
        let mut g = self.generate_batch(&[img], &[seed], self.config.steps, self.config.tau)?;
        Ok(g.remove(0))
    }
}

pub fn backbone_shape(cfg: &Config) -> BackboneShape {
    BackboneShape {
        p_max: cfg.p_max,
        tokens: cfg.tokens_per_part,
        width: cfg.latent_dim,
        feature_dim: cfg.feature_dim,
        hidden: cfg.hidden,
        blocks: cfg.blocks,
        heads: cfg.heads,
        ff_mult: cfg.ff_mult,
    }
}

/// Sampling seed of the object at `index` under run seed `seed`.
pub fn object_seed(seed: u64, index: usize) -> u64 {
    use rand::Rng;
    stream_rng(seed, streams::SAMPLE).random::<u64>() ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Standard normal draw of a given shape, used by tests and the trainer.
pub fn gaussian(seed: u64, stream: u64, shape: &[usize], dtype: DType) -> Result<Tensor> {
    normal_tensor(&mut stream_rng(seed, stream), shape, 1.0, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        Config {
            points_per_part: 16,
            render_size: 8,
            p_max: 4,
            max_parts: 4,
            tokens_per_part: 2,
            latent_dim: 4,
            codec_decoder_hidden: 8,
            feature_dim: 8,
            view_hidden: 8,
            gate_hidden: 8,
            num_prototypes: 3,
            hidden: 8,
            blocks: 1,
            heads: 2,
            ff_mult: 2,
            steps: 2,
            ..Config::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Model::new(&tiny()).unwrap();
        let bytes = m.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(m.to_checkpoint().unwrap(), back.to_checkpoint().unwrap());
        assert_eq!(bytes, back.to_checkpoint().unwrap().to_bytes().unwrap());
    }

    #[test]
    fn truncated_payload_names_a_tensor() {
        let bytes = Model::new(&tiny()).unwrap().to_checkpoint().unwrap().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::CheckpointTensor { .. }), "{err}");
    }

    #[test]
    fn version_and_shape_are_validated() {
        let mut bytes = Model::new(&tiny()).unwrap().to_checkpoint().unwrap().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
        let ckpt = Model::new(&tiny()).unwrap().to_checkpoint().unwrap();
        let mut other = tiny();
        other.p_max = 6;
        assert!(matches!(
            Model::from_checkpoint_with(&ckpt, &other),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn generation_respects_the_selection() {
        let m = Model::new(&tiny()).unwrap();
        let img = ConditionImage {
            size: 8,
            pixels: vec![0.5; 64],
            camera_tag: "t".into(),
        };
        let g = m.generate(&img, 3).unwrap();
        assert_eq!(g.parts.len(), g.active.len());
        assert_eq!(g.active, select_active(&g.alpha, 0.5).unwrap());
        let again = m.generate(&img, 3).unwrap();
        assert_eq!(g.parts[0].points, again.parts[0].points);
    }
}
