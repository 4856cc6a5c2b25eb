//! On-disk store of selected frozen features.
//!
//! One `<split>.fptc` file per split: the FPTC preamble carrying a JSON
//! [`CacheManifest`], then one fixed-size record per sample. Each record holds,
//! layer by layer, the kept token indices (`u32`) followed by keys and values
//! (`f32`, `[S, h, d/h]`). A copy of the manifest is written next to it as
//! `<split>.manifest.json`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use fpt_numerics::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::binio;
use crate::config::FptConfig;
use crate::data::{resize_bilinear, to_tensor, Image, NormStats, Sample, Split};
use crate::error::{FptError, Result};
use crate::selection::{kept_count, FeatureCollector, LayerFusionFeatures, SELECTION_RULE_VERSION};

pub const CACHE_MAGIC: &[u8; 4] = b"FPTC";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_DIR_ENV: &str = "FPT_CACHE_DIR";

/// Digest of every setting that changes cached bytes. Side-network, prompt
/// and optimizer settings are deliberately left out.
pub fn config_hash(cfg: &FptConfig, backbone_identity: u64) -> u64 {
    let b = &cfg.backbone;
    let s = &cfg.selection;
    let mut text = format!(
        "fptc/{CACHE_VERSION}|rule/{SELECTION_RULE_VERSION}|res/{}|patch/{}|layers/{}|dim/{}|heads/{}|mlp/{}|ratio/{:016x}|cls/{}|scope/{:?}|backbone/{backbone_identity:016x}",
        b.image_size_high,
        b.patch_size,
        b.layers,
        b.dim,
        b.heads,
        b.mlp_ratio,
        s.ratio.to_bits(),
        s.keep_cls,
        s.scope,
    );
    if cfg.data.root.is_none() {
        // Synthetic images are a function of their spec, so it belongs in the key.
        let d = &cfg.data.synth;
        text += &format!(
            "|synth/{}/{}/{}/{:016x}/{:016x}/{}/{}",
            d.canvas,
            d.cue_size,
            d.num_classes,
            d.noise.to_bits(),
            d.contrast.to_bits(),
            d.samples,
            d.seed
        );
    }
    let h = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheRecord {
    pub id: String,
    pub label: usize,
    /// Byte offset from the start of the record area.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub version: u32,
    pub config_hash: u64,
    pub config_digest: String,
    pub split: Split,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Tokens kept per layer, CLS included.
    pub kept_tokens: usize,
    pub record_bytes: u64,
    pub dtype: String,
    pub endianness: String,
    pub samples: Vec<CacheRecord>,
    pub skipped: Vec<SkippedSample>,
}

impl CacheManifest {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

/// Bytes of one record: indices plus keys and values for every layer.
pub fn record_bytes(layers: usize, kept: usize, heads: usize, head_dim: usize) -> u64 {
    (layers * kept * (4 + 2 * heads * head_dim * 4)) as u64
}

/// Tokens kept per layer under `cfg`.
pub fn kept_tokens(cfg: &FptConfig) -> usize {
    let n = cfg.backbone.num_tokens();
    if cfg.selection.keep_cls {
        1 + kept_count(n - 1, cfg.selection.ratio)
    } else {
        kept_count(n, cfg.selection.ratio)
    }
}

/// One sample's cached features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCacheEntry {
    pub sample_id: String,
    pub config_hash: u64,
    pub layers: Vec<LayerFusionFeatures>,
}

/// Deterministic high-resolution input for the frozen path.
pub fn high_res_input(images: &[&Image], resolution: usize) -> Result<Tensor<f32>> {
    let resized: Vec<Image> = images.iter().map(|i| resize_bilinear(i, resolution)).collect();
    let refs: Vec<&Image> = resized.iter().collect();
    to_tensor(&refs, &NormStats::BACKBONE)
}

/// Frozen forward plus selection for a batch; features indexed `[sample][layer]`.
pub fn compute_features(backbone: &Backbone, images: &[&Image], cfg: &FptConfig) -> Result<Vec<Vec<LayerFusionFeatures>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let x = high_res_input(images, cfg.backbone.image_size_high)?;
    let mut collector = FeatureCollector::new(&cfg.selection)?;
    backbone.forward_each(&x, |tap| collector.push(tap))?;
    collector.finish()
}

fn encode_record(layers: &[LayerFusionFeatures], out: &mut Vec<u8>) {
    for f in layers {
        binio::put_u32s(out, &f.indices);
        binio::put_f32s(out, f.keys.data());
        binio::put_f32s(out, f.values.data());
    }
}

pub fn cache_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}.fptc", split.name())),
        dir.join(format!("{}.manifest.json", split.name())),
    )
}

/// Runs the frozen path over `samples` and writes the split's cache files.
/// Existing caches are only replaced with `force`.
pub fn build_cache(
    samples: &[Sample],
    skipped: &[(String, String)],
    split: Split,
    cfg: &FptConfig,
    backbone: &Backbone,
    dir: &Path,
    force: bool,
) -> Result<CacheManifest> {
    let violations = backbone.freeze_violations();
    if !violations.is_empty() {
        return Err(FptError::FreezeContract(format!("backbone tensors not frozen: {}", violations.join(", "))));
    }
    let (data_path, manifest_path) = cache_paths(dir, split);
    if !force && (data_path.exists() || manifest_path.exists()) {
        return Err(FptError::CacheExists(data_path));
    }
    std::fs::create_dir_all(dir).map_err(|e| FptError::io(dir, e))?;

    let hash = config_hash(cfg, backbone.identity());
    let bb = &cfg.backbone;
    let kept = kept_tokens(cfg);
    let rec = record_bytes(bb.layers, kept, bb.heads, bb.head_dim());
    let records: Vec<Vec<u8>> = samples
        .par_iter()
        .map(|s| {
            let feats = compute_features(backbone, &[&s.image], cfg)?;
            let mut bytes = Vec::with_capacity(rec as usize);
            encode_record(&feats[0], &mut bytes);
            debug_assert_eq!(bytes.len() as u64, rec);
            Ok(bytes)
        })
        .collect::<Result<_>>()?;

    let manifest = CacheManifest {
        version: CACHE_VERSION,
        config_hash: hash,
        config_digest: cfg.digest(),
        split,
        layers: bb.layers,
        heads: bb.heads,
        head_dim: bb.head_dim(),
        kept_tokens: kept,
        record_bytes: rec,
        dtype: "f32".into(),
        endianness: "little".into(),
        samples: samples
            .iter()
            .enumerate()
            .map(|(i, s)| CacheRecord {
                id: s.id.clone(),
                label: s.label,
                offset: i as u64 * rec,
            })
            .collect(),
        skipped: skipped
            .iter()
            .map(|(id, reason)| SkippedSample {
                id: id.clone(),
                reason: reason.clone(),
            })
            .collect(),
    };
    let mut bytes = Vec::new();
    binio::write_preamble(&mut bytes, CACHE_MAGIC, CACHE_VERSION, &manifest).expect("in-memory write");
    for r in records {
        bytes.extend_from_slice(&r);
    }
    // Drop the old manifest first so a crash in between leaves a detectable partial state.
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| FptError::io(&manifest_path, e))?;
    }
    binio::write_atomic(&data_path, &bytes)?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    binio::write_atomic(&manifest_path, &json)?;
    Ok(manifest)
}

/// Read-only view of one split's cache.
pub struct FeatureCache {
    path: PathBuf,
    manifest: CacheManifest,
    bytes: Vec<u8>,
    data_start: usize,
    index: HashMap<String, usize>,
}

impl FeatureCache {
    /// Opens a split's cache and checks it was built for `expected_hash`.
    pub fn open(dir: &Path, split: Split, expected_hash: u64) -> Result<Self> {
        let (data_path, manifest_path) = cache_paths(dir, split);
        let partial = data_path.with_extension("fptc.partial");
        if partial.exists() || (data_path.exists() != manifest_path.exists()) {
            return Err(FptError::PartialCache(data_path));
        }
        if !data_path.exists() {
            return Err(FptError::CacheLookup(format!("no cache at {}", data_path.display())));
        }
        let bytes = binio::read_file(&data_path)?;
        let (manifest, data_start): (CacheManifest, usize) =
            binio::parse_preamble(&bytes, CACHE_MAGIC, CACHE_VERSION, &data_path)?;
        if manifest.config_hash != expected_hash {
            return Err(FptError::StaleCache {
                expected: expected_hash,
                found: manifest.config_hash,
            });
        }
        let want = data_start as u64 + manifest.record_bytes * manifest.samples.len() as u64;
        if bytes.len() as u64 != want {
            return Err(FptError::PartialCache(data_path));
        }
        let index = manifest.samples.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Self {
            path: data_path,
            manifest,
            bytes,
            data_start,
            index,
        })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn load_entry(&self, id: &str) -> Result<FeatureCacheEntry> {
        let &i = self
            .index
            .get(id)
            .ok_or_else(|| FptError::CacheLookup(format!("sample {id} is not in {}", self.path.display())))?;
        let m = &self.manifest;
        let start = self.data_start + m.samples[i].offset as usize;
        let mut r = binio::Reader::new(&self.bytes, start, &self.path);
        let mut layers = Vec::with_capacity(m.layers);
        for layer in 0..m.layers {
            let indices = r.u32s(m.kept_tokens)?;
            let n = m.kept_tokens * m.heads * m.head_dim;
            let shape = [m.kept_tokens, m.heads, m.head_dim];
            let keys = Tensor::new(shape, r.f32s(n)?)?;
            let values = Tensor::new(shape, r.f32s(n)?)?;
            layers.push(LayerFusionFeatures {
                layer,
                indices,
                keys,
                values,
            });
        }
        Ok(FeatureCacheEntry {
            sample_id: id.to_string(),
            config_hash: m.config_hash,
            layers,
        })
    }
}
