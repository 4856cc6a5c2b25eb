//! Training and evaluation of the side network against frozen features.

use fpt_numerics::{adamw_step_store, ops, AdamWConfig, NumericsError, OptimizerState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::cache::{compute_features, config_hash, FeatureCache};
use crate::config::{FptConfig, TrainMode};
use crate::data::{resize_bilinear, to_tensor, AugmentParams, Dataset, Image, NormStats, Sample, Split};
use crate::error::{FptError, Result};
use crate::fusion::{Checkpoint, CheckpointHeader, FusionBatch, SideNetwork, SideShape};
use crate::metrics::{
    count_params, estimate_activation_memory, macro_auc, param_inventory, MemoryEstimate, MemoryMode,
};
use crate::selection::LayerFusionFeatures;

/// Where fusion features come from.
pub enum FeatureSource {
    /// Side-only runs have no frozen path.
    Disabled,
    /// Recompute the frozen forward for every batch.
    Live(Backbone),
    /// Read precomputed features; one cache per split that will be touched.
    Cache {
        train: Option<FeatureCache>,
        val: Option<FeatureCache>,
        test: Option<FeatureCache>,
    },
}

impl FeatureSource {
    /// Opens the caches of `splits` under `dir`, checking them against `cfg`
    /// and the backbone they must have come from.
    pub fn open_cache(dir: &std::path::Path, cfg: &FptConfig, backbone: &Backbone, splits: &[Split]) -> Result<Self> {
        let hash = config_hash(cfg, backbone.identity());
        let open = |s: Split| -> Result<Option<FeatureCache>> {
            if splits.contains(&s) {
                FeatureCache::open(dir, s, hash).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(FeatureSource::Cache {
            train: open(Split::Train)?,
            val: open(Split::Val)?,
            test: open(Split::Test)?,
        })
    }

    /// Per-layer fusion batches for `samples`, or `None` when disabled.
    pub fn batch(&self, samples: &[&Sample], split: Split, cfg: &FptConfig) -> Result<Option<Vec<FusionBatch<f32>>>> {
        let per_sample: Vec<Vec<LayerFusionFeatures>> = match self {
            FeatureSource::Disabled => return Ok(None),
            FeatureSource::Live(backbone) => {
                let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
                compute_features(backbone, &images, cfg)?
            }
            FeatureSource::Cache { train, val, test } => {
                let cache = match split {
                    Split::Train => train,
                    Split::Val => val,
                    Split::Test => test,
                }
                .as_ref()
                .ok_or_else(|| FptError::CacheLookup(format!("no cache opened for the {} split", split.name())))?;
                samples
                    .iter()
                    .map(|s| cache.load_entry(&s.id).map(|e| e.layers))
                    .collect::<Result<_>>()?
            }
        };
        let refs: Vec<&[LayerFusionFeatures]> = per_sample.iter().map(Vec::as_slice).collect();
        FusionBatch::stack_layers(&refs, cfg.backbone.layers).map(Some)
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        match self {
            FeatureSource::Live(b) => Some(b),
            _ => None,
        }
    }
}

/// The learnable side of a run plus what it needs at inference.
#[derive(Clone)]
pub struct FptModel {
    pub cfg: FptConfig,
    pub mode: TrainMode,
    pub side: SideNetwork<f32>,
    pub side_norm: NormStats,
    pub backbone_identity: Option<u64>,
}

impl FptModel {
    /// Fresh side network for `cfg.train.mode`; side normalization is fitted
    /// on the training split.
    pub fn new(cfg: &FptConfig, data: &Dataset, backbone_identity: Option<u64>) -> Result<Self> {
        let mode = cfg.train.mode;
        if mode.uses_backbone() != backbone_identity.is_some() {
            return Err(FptError::Config(format!(
                "mode {} {} a backbone",
                mode.name(),
                if mode.uses_backbone() { "needs" } else { "must not have" }
            )));
        }
        let cfg = cfg.for_mode(mode);
        let shape = SideShape::from_config(&cfg, mode, data.num_classes());
        Ok(Self {
            side_norm: NormStats::fit(&data.train, cfg.side_resolution(mode)),
            side: SideNetwork::new(shape, cfg.train.seed)?,
            cfg,
            mode,
            backbone_identity,
        })
    }

    pub fn side_resolution(&self) -> usize {
        self.cfg.side_resolution(self.mode)
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                config: self.cfg.clone(),
                config_digest: self.cfg.digest(),
                mode: self.mode,
                shape: self.side.shape().clone(),
                side_norm: self.side_norm,
                backbone_seed: self.cfg.backbone.seed,
                backbone_identity: self.backbone_identity,
                epoch,
                tensors: Vec::new(),
            },
            side: self.side.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            mode: ckpt.header.mode,
            cfg: ckpt.header.config,
            side_norm: ckpt.header.side_norm,
            backbone_identity: ckpt.header.backbone_identity,
            side: ckpt.side,
        }
    }

    /// Class probabilities for `samples`, `[n, C]` row-major.
    pub fn predict_proba(&self, samples: &[Sample], split: Split, features: &FeatureSource) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len() * self.side.shape().num_classes);
        for chunk in samples.chunks(self.cfg.train.batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let x = side_input(&refs, self.side_resolution(), &self.side_norm, None)?;
            let feats = features.batch(&refs, split, &self.cfg)?;
            let logits = self.side.predict(&x, feats.as_deref())?;
            let probs = ops::softmax(&logits, 1)?;
            out.extend(probs.data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }
}

/// Side-network input: resize to `resolution`, then augment when `aug` is given.
pub fn side_input(samples: &[&Sample], resolution: usize, norm: &NormStats, aug: Option<&[AugmentParams]>) -> Result<Tensor<f32>> {
    let images: Vec<Image> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let low = resize_bilinear(&s.image, resolution);
            match aug {
                Some(a) => a[i].apply(&low),
                None => low,
            }
        })
        .collect();
    let refs: Vec<&Image> = images.iter().collect();
    to_tensor(&refs, norm)
}

/// Macro one-vs-rest AUC of `model` on one split.
pub fn evaluate(model: &FptModel, data: &Dataset, split: Split, features: &FeatureSource) -> Result<f64> {
    let samples = data.split(split);
    let probs = model.predict_proba(samples, split, features)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    macro_auc(&probs, model.side.shape().num_classes, &labels)
}

/// Outcome of `freeze_check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub passed: bool,
    /// Backbone tensors that changed, are flagged learnable, or hold a gradient.
    pub violations: Vec<String>,
}

/// Checks the frozen backbone of `features`; vacuous without one.
pub fn freeze_check(features: &FeatureSource) -> FreezeReport {
    let violations = features.backbone().map(Backbone::freeze_violations).unwrap_or_default();
    FreezeReport {
        passed: violations.is_empty(),
        violations,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step_losses: Vec<f64>,
    pub mean_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_digest: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub learnable_params: usize,
    pub total_params: usize,
    pub param_ratio: f64,
    pub memory: MemoryEstimate,
    /// Full fine-tuning count at the same shape, the reference for memory ratios.
    pub memory_full_finetune: u64,
    pub test_auc: Option<f64>,
}

/// Deterministic mini-batch schedule and optimizer state for one run.
pub struct Trainer<'a> {
    data: &'a Dataset,
    features: &'a FeatureSource,
    model: FptModel,
    opt: OptimizerState<f32>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: FptModel, data: &'a Dataset, features: &'a FeatureSource) -> Result<Self> {
        let fusion = model.side.shape().fusion;
        let has_features = !matches!(features, FeatureSource::Disabled);
        if fusion != has_features {
            return Err(FptError::Config(format!(
                "mode {} {} fusion features",
                model.mode.name(),
                if fusion { "needs" } else { "takes no" }
            )));
        }
        if let (Some(b), Some(id)) = (features.backbone(), model.backbone_identity) {
            if b.identity() != id {
                return Err(FptError::Config("model was built for a different backbone".into()));
            }
        }
        let t = &model.cfg.train;
        let opt = OptimizerState::new(AdamWConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            ..Default::default()
        });
        Ok(Self {
            data,
            features,
            model,
            opt,
        })
    }

    pub fn model(&self) -> &FptModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut FptModel {
        &mut self.model
    }

    pub fn into_model(self) -> FptModel {
        self.model
    }

    /// Stream `(epoch, 0)` shuffles; `(epoch, step + 1)` drives that step's
    /// augmentation and dropout.
    fn rng(&self, epoch: usize, stream: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.cfg.train.seed);
        rng.set_stream((epoch as u64) << 32 | stream as u64);
        rng
    }

    /// Shuffled training-index batches for `epoch`; the last may be short.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng(epoch, 0));
        order.chunks(self.model.cfg.train.batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// One optimizer step on the given training indices; returns the loss.
    pub fn step(&mut self, epoch: usize, step: usize, batch: &[usize]) -> Result<f64> {
        let mut rng = self.rng(epoch, step + 1);
        let samples: Vec<&Sample> = batch.iter().map(|&i| &self.data.train[i]).collect();
        let aug: Vec<AugmentParams> = samples.iter().map(|_| AugmentParams::sample(&mut rng)).collect();
        let x = side_input(&samples, self.model.side_resolution(), &self.model.side_norm, Some(&aug))?;
        let feats = self.features.batch(&samples, Split::Train, &self.model.cfg)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();

        let p = self.model.cfg.side.dropout;
        let mut tape = Tape::new();
        let side = &self.model.side;
        let nan = |loss: f32| FptError::NanLoss { epoch, step, loss };
        // Kernels refuse non-finite softmax inputs; surface those as the loss blowing up.
        let non_finite = |e: FptError| match e {
            FptError::Numerics(NumericsError::InvalidValue(_)) => nan(f32::NAN),
            e => e,
        };
        let out = side
            .forward(&mut tape, &x, feats.as_deref(), (p > 0.0).then_some((p, &mut rng)))
            .map_err(non_finite)?;
        let loss_var = tape.cross_entropy(out.logits, &labels).map_err(|e| non_finite(e.into()))?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(nan(loss));
        }
        let loss = loss as f64;
        let grads = tape.backward(loss_var)?;
        let store = self.model.side.store_mut();
        store.clear_grads();
        store.set_grads(grads)?;
        adamw_step_store(store, &mut self.opt)?;
        Ok(loss)
    }

    /// Runs one epoch, or its first `max_steps` steps.
    pub fn run_epoch(&mut self, epoch: usize, max_steps: Option<usize>) -> Result<Vec<f64>> {
        let batches = self.epoch_batches(epoch);
        let n = max_steps.map_or(batches.len(), |m| m.min(batches.len()));
        batches[..n].iter().enumerate().map(|(i, b)| self.step(epoch, i, b)).collect()
    }

    /// Full run. Returns the model from the epoch with the best validation
    /// AUC (earliest on ties) and the run report.
    pub fn train(mut self) -> Result<(FptModel, TrainReport)> {
        let epochs = self.model.cfg.train.epochs;
        if epochs > 0 && self.data.val.is_empty() {
            return Err(FptError::Data("validation split is empty; best-epoch selection needs it".into()));
        }
        let mut records = Vec::with_capacity(epochs);
        let mut best: Option<(usize, f64, FptModel)> = None;
        for epoch in 0..epochs {
            let step_losses = self.run_epoch(epoch, None)?;
            let val_auc = evaluate(&self.model, self.data, Split::Val, self.features)?;
            let mean_loss = step_losses.iter().sum::<f64>() / step_losses.len().max(1) as f64;
            if best.as_ref().map_or(true, |(_, b, _)| val_auc > *b) {
                best = Some((epoch, val_auc, self.model.clone()));
            }
            records.push(EpochRecord {
                epoch,
                step_losses,
                mean_loss,
                val_auc,
            });
        }
        let (best_epoch, best_val_auc, mut model) = best.unwrap_or((0, f64::NAN, self.model.clone()));
        model.side.store_mut().clear_grads();
        let test_auc = if self.data.test.is_empty() {
            None
        } else {
            Some(evaluate(&model, self.data, Split::Test, self.features)?)
        };
        let report = report_for(&model, self.data.num_classes(), records, best_epoch, best_val_auc, test_auc);
        Ok((model, report))
    }
}

fn report_for(
    model: &FptModel,
    num_classes: usize,
    epochs: Vec<EpochRecord>,
    best_epoch: usize,
    best_val_auc: f64,
    test_auc: Option<f64>,
) -> TrainReport {
    let cfg = &model.cfg;
    let inv = param_inventory(cfg, model.mode, num_classes);
    let learnable = count_params(model.side.store(), true);
    TrainReport {
        config_digest: cfg.digest(),
        mode: model.mode,
        seed: cfg.train.seed,
        epochs,
        best_epoch,
        best_val_auc,
        learnable_params: learnable,
        total_params: inv.backbone + learnable,
        param_ratio: learnable as f64 / (inv.backbone + learnable) as f64,
        memory: estimate_activation_memory(cfg, MemoryMode::for_train_mode(cfg, model.mode), num_classes),
        memory_full_finetune: estimate_activation_memory(cfg, MemoryMode::FullFineTune, num_classes).retained,
        test_auc,
    }
}
