//! Frozen ViT encoder run at the high input resolution.
//!
//! Weights live in a [`ParamStore`] flagged frozen. Forward passes use plain
//! kernels and hand each layer's activations, attention map and per-head K/V
//! to the caller before moving on.

use std::path::Path;

use fpt_numerics::{ops, ParamId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio;
use crate::block::{block_infer, BlockIds};
use crate::config::BackboneConfig;
use crate::error::{FptError, Result};
use crate::init::Init;

/// Per-layer view of the frozen forward.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTap {
    pub layer: usize,
    /// `[B, N, d]`
    pub tokens: Tensor<f32>,
    /// `[B, h, N, N]`
    pub attn: Tensor<f32>,
    /// `[B, h, N, d/h]`
    pub keys: Tensor<f32>,
    /// `[B, h, N, d/h]`
    pub values: Tensor<f32>,
}

/// `[B, 3, H, W]` → `[B, (H/p)·(W/p), 3·p·p]`, patches in row-major order and
/// each patch flattened as (channel, row, col).
pub fn patchify(images: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(FptError::Config(format!("expected [B, 3, H, W] images, got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(FptError::Config(format!("image {h}x{w} is not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..3 {
                    for y in 0..patch {
                        let row = ((bi * 3 + c) * h + py * patch + y) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new([b, gh * gw, 3 * patch * patch], out)?)
}

fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Resampling matrix `[out, in]` for 1-D bicubic interpolation with
/// half-pixel centers and clamped borders.
fn bicubic_matrix(input: usize, output: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; input]; output];
    for (o, row) in m.iter_mut().enumerate() {
        let src = (o as f64 + 0.5) * input as f64 / output as f64 - 0.5;
        let base = src.floor();
        let w = cubic_weights(src - base);
        for (k, wk) in w.iter().enumerate() {
            let idx = (base as i64 - 1 + k as i64).clamp(0, input as i64 - 1) as usize;
            row[idx] += wk;
        }
    }
    m
}

/// Resamples a `[1 + g², d]` positional table (CLS row first) to a
/// `target × target` grid. The CLS row is copied unchanged.
pub fn interpolate_pos_embed(pos: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let (rows, d) = (pos.shape()[0], pos.shape()[1]);
    let g = ((rows.saturating_sub(1)) as f64).sqrt().round() as usize;
    if g * g + 1 != rows || g == 0 || target == 0 {
        return Err(FptError::Config(format!(
            "positional table with {rows} rows is not 1 + a square grid"
        )));
    }
    if g == target {
        return Ok(pos.clone());
    }
    let m = bicubic_matrix(g, target);
    let src = pos.data();
    let at = |y: usize, x: usize, c: usize| src[(1 + y * g + x) * d + c] as f64;
    // Rows first, then columns; accumulate in f64.
    let mut tmp = vec![0.0f64; target * g * d];
    for (oy, wy) in m.iter().enumerate() {
        for x in 0..g {
            for c in 0..d {
                tmp[(oy * g + x) * d + c] = (0..g).map(|y| wy[y] * at(y, x, c)).sum();
            }
        }
    }
    let mut out = Vec::with_capacity((1 + target * target) * d);
    out.extend_from_slice(&src[..d]);
    for oy in 0..target {
        for wx in &m {
            for c in 0..d {
                let v: f64 = (0..g).map(|x| wx[x] * tmp[(oy * g + x) * d + c]).sum();
                out.push(v as f32);
            }
        }
    }
    Ok(Tensor::new([1 + target * target, d], out)?)
}

#[derive(Clone, Debug)]
struct EmbedIds {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
}

pub struct Backbone {
    cfg: BackboneConfig,
    weights: ParamStore<f32>,
    embed: EmbedIds,
    blocks: Vec<BlockIds>,
    /// Positional table resampled to the run's grid.
    pos_grid: Tensor<f32>,
    /// Per-tensor digests taken at construction, for the freeze check.
    reference: Vec<[u8; 32]>,
    identity: u64,
}

fn tensor_digest(name: &str, t: &Tensor<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for s in t.shape() {
        h.update((*s as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Header of an FPTW weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub pretrain_grid: usize,
    pub dtype: String,
    pub endianness: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub const WEIGHTS_MAGIC: &[u8; 4] = b"FPTW";
pub const WEIGHTS_VERSION: u32 = 1;

impl Backbone {
    /// Builds the backbone from `cfg.weights` when set, else from `cfg.seed`.
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        match &cfg.weights {
            Some(path) => Self::import(cfg, path),
            None => Self::random(cfg),
        }
    }

    /// Seeded random stand-in weights.
    pub fn random(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let pdim = 3 * cfg.patch_size * cfg.patch_size;
        let g = cfg.pretrain_grid;
        let embed = EmbedIds {
            patch_w: store.add("patch_embed.weight", init.xavier(pdim, d)),
            patch_b: store.add("patch_embed.bias", Tensor::zeros([d])),
            cls: store.add("cls_token", init.normal(&[d], 0.02)),
            pos: store.add("pos_embed", init.normal(&[1 + g * g, d], 0.02)),
        };
        let blocks = (0..cfg.layers)
            .map(|l| BlockIds::register(&mut store, &format!("blocks.{l}"), d, cfg.mlp_ratio, &mut init, false))
            .collect();
        Self::assemble(cfg, store, embed, blocks)
    }

    fn assemble(cfg: &BackboneConfig, mut store: ParamStore<f32>, embed: EmbedIds, blocks: Vec<BlockIds>) -> Result<Self> {
        store.set_requires_grad(false);
        let pos_grid = interpolate_pos_embed(store.value(embed.pos), cfg.grid())?;
        let reference: Vec<_> = store.iter().map(|(_, p)| tensor_digest(&p.name, &p.value)).collect();
        let mut h = Sha256::new();
        for r in &reference {
            h.update(r);
        }
        let identity = u64::from_le_bytes(h.finalize()[..8].try_into().unwrap());
        Ok(Self {
            cfg: cfg.clone(),
            weights: store,
            embed,
            blocks,
            pos_grid,
            reference,
            identity,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ParamStore<f32> {
        &self.weights
    }

    /// Mutable access, used to inject faults in freeze-contract tests.
    pub fn weights_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.weights
    }

    /// Digest of all weights at construction time.
    pub fn identity(&self) -> u64 {
        self.identity
    }

    pub fn num_params(&self) -> usize {
        self.weights.count(false)
    }

    /// Names of tensors that are flagged learnable, hold a gradient buffer, or
    /// differ from their construction-time values.
    pub fn freeze_violations(&self) -> Vec<String> {
        self.weights
            .iter()
            .zip(&self.reference)
            .filter(|((_, p), r)| p.value.requires_grad() || p.grad.is_some() || tensor_digest(&p.name, &p.value) != **r)
            .map(|((_, p), _)| p.name.clone())
            .collect()
    }

    fn check_frozen(&self) -> Result<()> {
        // Cheap flag check on every forward; value digests only in freeze_violations.
        match self.weights.iter().find(|(_, p)| p.value.requires_grad() || p.grad.is_some()) {
            Some((_, p)) => Err(FptError::FreezeContract(format!("backbone tensor {} is not frozen", p.name))),
            None => Ok(()),
        }
    }

    /// `[B, 3, H, H]` → `[B, 1 + (H/p)², d]` with CLS at index 0.
    pub fn patch_embed(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = images.shape();
        if s.len() != 4 || s[2] != self.cfg.image_size_high || s[3] != self.cfg.image_size_high {
            return Err(FptError::Config(format!(
                "backbone expects [B, 3, {0}, {0}] input, got {s:?}",
                self.cfg.image_size_high
            )));
        }
        let patches = patchify(images, self.cfg.patch_size)?;
        let w = &self.weights;
        let emb = ops::linear(&patches, w.value(self.embed.patch_w), Some(w.value(self.embed.patch_b)))?;
        let b = s[0];
        let cls = Tensor::from_fn([b, 1, self.cfg.dim], |i| w.value(self.embed.cls).data()[i % self.cfg.dim]);
        let x = ops::concat(&[&cls, &emb], 1)?;
        Ok(ops::add_broadcast(&x, &self.pos_grid)?)
    }

    /// Runs every layer, passing each tap to `visit` as soon as it exists.
    pub fn forward_each(&self, images: &Tensor<f32>, mut visit: impl FnMut(LayerTap) -> Result<()>) -> Result<()> {
        self.check_frozen()?;
        let mut x = self.patch_embed(images)?;
        for (layer, ids) in self.blocks.iter().enumerate() {
            let out = block_infer(&self.weights, ids, &x, self.cfg.heads)?;
            x = out.out.clone();
            visit(LayerTap {
                layer,
                tokens: out.out,
                attn: out.attn,
                keys: out.keys,
                values: out.values,
            })?;
        }
        Ok(())
    }

    pub fn forward(&self, images: &Tensor<f32>) -> Result<Vec<LayerTap>> {
        let mut taps = Vec::with_capacity(self.cfg.layers);
        self.forward_each(images, |t| {
            taps.push(t);
            Ok(())
        })?;
        Ok(taps)
    }

    pub fn manifest(&self) -> WeightManifest {
        WeightManifest {
            layers: self.cfg.layers,
            dim: self.cfg.dim,
            heads: self.cfg.heads,
            mlp_ratio: self.cfg.mlp_ratio,
            patch_size: self.cfg.patch_size,
            pretrain_grid: self.cfg.pretrain_grid,
            dtype: "f32".into(),
            endianness: "little".into(),
            tensors: self
                .weights
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        }
    }

    /// Writes the weights as an FPTW file.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        binio::write_preamble(&mut bytes, WEIGHTS_MAGIC, WEIGHTS_VERSION, &self.manifest()).expect("in-memory write");
        for (_, p) in self.weights.iter() {
            binio::put_f32s(&mut bytes, p.value.data());
        }
        binio::write_atomic(path, &bytes)
    }

    /// Loads an FPTW file. Architecture fields must match `cfg`; the input
    /// resolution may differ, in which case positions are resampled.
    pub fn import(cfg: &BackboneConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let bytes = binio::read_file(path)?;
        let (header, start): (WeightManifest, usize) =
            binio::parse_preamble(&bytes, WEIGHTS_MAGIC, WEIGHTS_VERSION, path)?;
        let want = (cfg.layers, cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.patch_size, cfg.pretrain_grid);
        let got = (
            header.layers,
            header.dim,
            header.heads,
            header.mlp_ratio,
            header.patch_size,
            header.pretrain_grid,
        );
        if want != got {
            return Err(FptError::Config(format!(
                "weight file {} has (layers, dim, heads, mlp, patch, grid) = {got:?}, config wants {want:?}",
                path.display()
            )));
        }
        if header.dtype != "f32" || header.endianness != "little" {
            return Err(FptError::format(path, "only little-endian f32 weights are supported"));
        }
        // Build the expected layout, then fill it from the file in order.
        let mut layout = Self::random(&BackboneConfig {
            weights: None,
            ..cfg.clone()
        })?;
        let expected = layout.manifest().tensors;
        if expected != header.tensors {
            return Err(FptError::format(path, "tensor directory does not match the backbone layout"));
        }
        let mut reader = binio::Reader::new(&bytes, start, path);
        let ids: Vec<ParamId> = layout.weights.iter().map(|(id, _)| id).collect();
        for (id, entry) in ids.into_iter().zip(&header.tensors) {
            let n = entry.shape.iter().product();
            let data = reader.f32s(n)?;
            layout.weights.get_mut(id).value = Tensor::new(entry.shape.clone(), data)?;
        }
        if !reader.is_empty() {
            return Err(FptError::format(path, "trailing bytes after tensor data"));
        }
        let Backbone {
            weights, embed, blocks, ..
        } = layout;
        Self::assemble(cfg, weights, embed, blocks)
    }
}
