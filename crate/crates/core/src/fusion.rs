//! Learnable side network with per-layer fine-grained prompts.
//!
//! Each side layer first lets its prompts cross-attend into the frozen keys and
//! values selected from the matching backbone layer, appends the updated
//! prompts to the side sequence, runs a transformer block, then drops the
//! prompt rows again.

use std::path::Path;

use fpt_numerics::{ops, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::patchify;
use crate::binio;
use crate::block::{block_tape, BlockIds, Dropout, LN_EPS};
use crate::config::{FptConfig, TrainMode};
use crate::data::NormStats;
use crate::error::{FptError, Result};
use crate::init::Init;
use crate::selection::LayerFusionFeatures;

/// Architecture of one side network instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideShape {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub resolution: usize,
    pub num_classes: usize,
    /// Backbone width and head count seen by the fusion modules.
    pub backbone_dim: usize,
    pub backbone_heads: usize,
    pub num_prompts: usize,
    pub shared_prompts: bool,
    /// Without fusion the network is a plain small ViT classifier.
    pub fusion: bool,
}

impl SideShape {
    pub fn from_config(cfg: &FptConfig, mode: TrainMode, num_classes: usize) -> Self {
        Self {
            layers: cfg.backbone.layers,
            dim: cfg.side_dim(),
            heads: cfg.side_heads(),
            mlp_ratio: cfg.side.mlp_ratio,
            patch_size: cfg.backbone.patch_size,
            resolution: cfg.side_resolution(mode),
            num_classes,
            backbone_dim: cfg.backbone.dim,
            backbone_heads: cfg.backbone.heads,
            num_prompts: cfg.side.num_prompts,
            shared_prompts: cfg.side.shared_prompts,
            fusion: mode.uses_backbone(),
        }
    }

    /// Side sequence length, CLS included.
    pub fn num_tokens(&self) -> usize {
        let g = self.resolution / self.patch_size;
        g * g + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Learnable pieces of one fusion module.
#[derive(Clone, Copy, Debug)]
pub struct FusionIds {
    pub prompts: ParamId,
    pub f_in: Linear,
    pub f_out: Linear,
}

#[derive(Clone, Debug)]
struct SideIds {
    patch: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    fusion: Vec<FusionIds>,
    norm_g: ParamId,
    norm_b: ParamId,
    head: Linear,
}

#[derive(Clone)]
pub struct SideNetwork<T: Real> {
    shape: SideShape,
    store: ParamStore<T>,
    ids: SideIds,
}

/// One layer's fusion features for a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBatch<T> {
    pub layer: usize,
    /// `[B, h_M, S, d_M/h_M]`
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Real> FusionBatch<T> {
    /// Stacks per-sample `[S, h, dh]` features of one layer.
    pub fn stack(items: &[&LayerFusionFeatures]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| FptError::Config("cannot stack an empty feature batch".into()))?;
        let layer = first.layer;
        let shape = first.keys.shape().to_vec();
        let mut keys = Vec::with_capacity(items.len() * first.keys.numel());
        let mut values = Vec::with_capacity(keys.capacity());
        for f in items {
            if f.layer != layer || f.keys.shape() != shape.as_slice() || f.values.shape() != shape.as_slice() {
                return Err(FptError::Config(format!(
                    "feature batch mixes layers or sizes ({} {:?} vs {layer} {shape:?})",
                    f.layer,
                    f.keys.shape()
                )));
            }
            keys.extend(f.keys.data().iter().map(|&v| T::lit(v as f64)));
            values.extend(f.values.data().iter().map(|&v| T::lit(v as f64)));
        }
        let (s, h, dh) = (shape[0], shape[1], shape[2]);
        let to_heads = |data: Vec<T>| -> Result<Tensor<T>> {
            let t = Tensor::new([items.len(), s, h, dh], data)?;
            Ok(ops::permute(&t, &[0, 2, 1, 3])?)
        };
        Ok(Self {
            layer,
            keys: to_heads(keys)?,
            values: to_heads(values)?,
        })
    }

    /// Stacks `[sample][layer]` features into one batch per layer.
    pub fn stack_layers(per_sample: &[&[LayerFusionFeatures]], layers: usize) -> Result<Vec<Self>> {
        (0..layers)
            .map(|l| {
                let items = per_sample
                    .iter()
                    .map(|s| {
                        s.get(l)
                            .ok_or_else(|| FptError::Config(format!("missing fusion features for layer {l}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::stack(&items)
            })
            .collect()
    }
}

/// Cross-attention of the prompts into frozen features, appended to `z_side`.
///
/// Returns the `[B, N_S + P, d_S]` sequence and the `[B, h_M, P, S]` map.
#[allow(clippy::too_many_arguments)]
pub fn ffm_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    ids: &FusionIds,
    z_side: Var,
    features: &FusionBatch<T>,
    layer: usize,
    backbone_heads: usize,
) -> Result<(Var, Option<Var>)> {
    if features.layer != layer {
        return Err(FptError::Config(format!(
            "fusion features from backbone layer {} fed to side layer {layer}",
            features.layer
        )));
    }
    let b = tape.shape(z_side)[0];
    let p = store.value(ids.prompts).shape()[0];
    if p == 0 {
        return Ok((z_side, None));
    }
    let kshape = features.keys.shape();
    if kshape[0] != b || kshape[1] != backbone_heads {
        return Err(FptError::Config(format!(
            "fusion features {kshape:?} do not match batch {b} with {backbone_heads} heads"
        )));
    }
    let dh = kshape[3];
    let prompts = tape.param(store, ids.prompts);
    let zp = tape.broadcast_batch(prompts, b);
    let (w_in, b_in) = (tape.param(store, ids.f_in.weight), tape.param(store, ids.f_in.bias));
    let q = tape.linear(zp, w_in, Some(b_in))?;
    let q = tape.reshape(q, &[b, p, backbone_heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.constant(features.keys.clone());
    let v = tape.constant(features.values.clone());
    let (ca, map) = tape.attention(q, k, v)?;
    let merged = tape.permute(ca, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[b, p, backbone_heads * dh])?;
    let (w_out, b_out) = (tape.param(store, ids.f_out.weight), tape.param(store, ids.f_out.bias));
    let fused = tape.linear(merged, w_out, Some(b_out))?;
    let rows = tape.add(fused, zp)?;
    Ok((tape.concat(&[z_side, rows], 1)?, Some(map)))
}

/// Forward products of the side network.
pub struct SideOutput {
    /// `[B, C]`
    pub logits: Var,
    /// Per-layer cross-attention maps, `[B, h_M, P, S]`.
    pub ca_maps: Vec<Var>,
    /// Side sequence length entering each layer and after the last one.
    pub lengths: Vec<usize>,
}

impl<T: Real> SideNetwork<T> {
    pub fn new(shape: SideShape, seed: u64) -> Result<Self> {
        if shape.dim % shape.heads != 0 || shape.dim < 2 {
            return Err(FptError::Config(format!("side dim {} not divisible by heads {}", shape.dim, shape.heads)));
        }
        if shape.resolution % shape.patch_size != 0 {
            return Err(FptError::Config(format!(
                "side resolution {} not divisible by patch size {}",
                shape.resolution, shape.patch_size
            )));
        }
        if shape.num_classes < 2 {
            return Err(FptError::Config("need at least two classes".into()));
        }
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let d = shape.dim;
        let pdim = 3 * shape.patch_size * shape.patch_size;
        let linear = |store: &mut ParamStore<T>, name: &str, w: Tensor<T>, n_out: usize| Linear {
            weight: store.add(format!("{name}.weight"), w.with_requires_grad(true)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([n_out]).with_requires_grad(true)),
        };
        let patch = linear(&mut store, "side.patch_embed", init.xavier(pdim, d), d);
        let cls = store.add("side.cls_token", init.normal(&[1, d], 0.02).with_requires_grad(true));
        let pos = store.add("side.pos_embed", init.normal(&[shape.num_tokens(), d], 0.02).with_requires_grad(true));
        let mut blocks = Vec::new();
        let mut fusion = Vec::new();
        let mut shared = None;
        for l in 0..shape.layers {
            blocks.push(BlockIds::register(&mut store, &format!("side.blocks.{l}"), d, shape.mlp_ratio, &mut init, true));
            if !shape.fusion {
                continue;
            }
            let prompts = match shared {
                Some(id) => id,
                None => {
                    let name = if shape.shared_prompts { "prompts".to_string() } else { format!("prompts.{l}") };
                    let id = store.add(name, init.normal(&[shape.num_prompts, d], 0.02).with_requires_grad(true));
                    if shape.shared_prompts {
                        shared = Some(id);
                    }
                    id
                }
            };
            let f_in = linear(&mut store, &format!("fusion.{l}.f_in"), init.xavier(d, shape.backbone_dim), shape.backbone_dim);
            let f_out = linear(&mut store, &format!("fusion.{l}.f_out"), Tensor::zeros([shape.backbone_dim, d]), d);
            fusion.push(FusionIds { prompts, f_in, f_out });
        }
        let norm_g = store.add("side.norm.weight", Tensor::full([d], T::one()).with_requires_grad(true));
        let norm_b = store.add("side.norm.bias", Tensor::zeros([d]).with_requires_grad(true));
        let head = linear(&mut store, "head", init.xavier(d, shape.num_classes), shape.num_classes);
        Ok(Self {
            shape,
            store,
            ids: SideIds {
                patch,
                cls,
                pos,
                blocks,
                fusion,
                norm_g,
                norm_b,
                head,
            },
        })
    }

    pub fn shape(&self) -> &SideShape {
        &self.shape
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn fusion_ids(&self, layer: usize) -> Option<&FusionIds> {
        self.ids.fusion.get(layer)
    }

    pub fn block_ids(&self, layer: usize) -> &BlockIds {
        &self.ids.blocks[layer]
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> SideNetwork<U> {
        SideNetwork {
            shape: self.shape.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }

    /// `[B, 3, r, r]` → `[B, N_S, d_S]` with CLS first.
    pub fn embed(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let s = images.shape();
        if s.len() != 4 || s[2] != self.shape.resolution || s[3] != self.shape.resolution {
            return Err(FptError::Config(format!(
                "side network expects [B, 3, {0}, {0}] input, got {s:?}",
                self.shape.resolution
            )));
        }
        let b = s[0];
        let as_f32 = images.cast::<f32>();
        let patches = patchify(&as_f32, self.shape.patch_size)?.cast::<T>();
        let x = tape.constant(patches);
        let (w, bias) = (tape.param(&self.store, self.ids.patch.weight), tape.param(&self.store, self.ids.patch.bias));
        let emb = tape.linear(x, w, Some(bias))?;
        let cls = tape.param(&self.store, self.ids.cls);
        let cls = tape.broadcast_batch(cls, b);
        let seq = tape.concat(&[cls, emb], 1)?;
        let pos = tape.param(&self.store, self.ids.pos);
        Ok(tape.add_broadcast(seq, pos)?)
    }

    /// Fusion, block, prompt removal for one layer.
    pub fn layer_forward(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        z_side: Var,
        features: Option<&FusionBatch<T>>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Var, Option<Var>)> {
        let n_side = tape.shape(z_side)[1];
        let (seq, map) = match (self.ids.fusion.get(layer), features) {
            (Some(ids), Some(f)) => {
                ffm_forward(tape, &self.store, ids, z_side, f, layer, self.shape.backbone_heads)?
            }
            (Some(_), None) => {
                return Err(FptError::Config(format!("missing fusion features for layer {layer}")));
            }
            (None, _) => (z_side, None),
        };
        let (out, _) = block_tape(tape, &self.store, &self.ids.blocks[layer], seq, self.shape.heads, dropout)?;
        Ok((tape.narrow(out, 1, 0, n_side)?, map))
    }

    /// Full forward from side images and per-layer fusion features.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        features: Option<&[FusionBatch<T>]>,
        mut dropout_rng: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<SideOutput> {
        if self.shape.fusion {
            let n = features.map_or(0, |f| f.len());
            if n != self.shape.layers {
                return Err(FptError::Config(format!(
                    "side network needs fusion features for {} layers, got {n}",
                    self.shape.layers
                )));
            }
        }
        let mut z = self.embed(tape, images)?;
        let mut lengths = vec![tape.shape(z)[1]];
        let mut ca_maps = Vec::new();
        for layer in 0..self.shape.layers {
            let f = features.and_then(|f| f.get(layer));
            let mut dropout = dropout_rng.as_mut().map(|(p, rng)| Dropout { p: *p, rng: &mut **rng });
            let (next, map) = self.layer_forward(tape, layer, z, f, dropout.as_mut())?;
            z = next;
            lengths.push(tape.shape(z)[1]);
            ca_maps.extend(map);
        }
        let (g, b) = (tape.param(&self.store, self.ids.norm_g), tape.param(&self.store, self.ids.norm_b));
        let z = tape.layer_norm(z, g, b, T::lit(LN_EPS))?;
        let batch = tape.shape(z)[0];
        let cls = tape.narrow(z, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[batch, self.shape.dim])?;
        let (w, bias) = (tape.param(&self.store, self.ids.head.weight), tape.param(&self.store, self.ids.head.bias));
        let logits = tape.linear(cls, w, Some(bias))?;
        Ok(SideOutput {
            logits,
            ca_maps,
            lengths,
        })
    }

    /// Logits without retaining anything for backward.
    pub fn predict(&self, images: &Tensor<T>, features: Option<&[FusionBatch<T>]>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, features, None)?;
        Ok(tape.value(out.logits).clone())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPTK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header of an FPTK checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: FptConfig,
    pub config_digest: String,
    pub mode: TrainMode,
    pub shape: SideShape,
    pub side_norm: NormStats,
    pub backbone_seed: u64,
    /// `None` when the mode never touched a backbone.
    pub backbone_identity: Option<u64>,
    pub epoch: usize,
    pub tensors: Vec<crate::backbone::TensorEntry>,
}

/// Learnable weights plus everything needed to rebuild and run them.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub side: SideNetwork<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = self.header.clone();
        header.tensors = self
            .side
            .store
            .iter()
            .map(|(_, p)| crate::backbone::TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        let mut bytes = Vec::new();
        binio::write_preamble(&mut bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header).expect("in-memory write");
        for (_, p) in self.side.store.iter() {
            binio::put_f32s(&mut bytes, p.value.data());
        }
        binio::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let (header, start): (CheckpointHeader, usize) =
            binio::parse_preamble(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, path)?;
        let mut side = SideNetwork::<f32>::new(header.shape.clone(), 0)?;
        let layout: Vec<_> = side
            .store
            .iter()
            .map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec()))
            .collect();
        if layout.len() != header.tensors.len()
            || layout.iter().zip(&header.tensors).any(|((_, n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(FptError::format(path, "tensor directory does not match the side network layout"));
        }
        let mut reader = binio::Reader::new(&bytes, start, path);
        for (id, _, shape) in layout {
            let data = reader.f32s(shape.iter().product())?;
            side.store.get_mut(id).value = Tensor::new(shape, data)?.with_requires_grad(true);
        }
        if !reader.is_empty() {
            return Err(FptError::format(path, "trailing bytes after tensor data"));
        }
        Ok(Self { header, side })
    }
}
