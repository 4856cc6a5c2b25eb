//! Parameter and activation-memory accounting, efficiency scores and AUC.

use fpt_numerics::{ParamStore, Real};
use serde::{Deserialize, Serialize};

use crate::cache::kept_tokens;
use crate::config::{FptConfig, TrainMode};
use crate::error::{FptError, Result};

/// Element count of a store, optionally only its learnable tensors.
pub fn count_params<T: Real>(store: &ParamStore<T>, learnable_only: bool) -> usize {
    store.count(learnable_only)
}

/// `(4 + 2r)·d² + (9 + r)·d`: two norms, qkv, projection and the MLP.
pub fn block_params(dim: usize, mlp_ratio: usize) -> usize {
    (4 + 2 * mlp_ratio) * dim * dim + (9 + mlp_ratio) * dim
}

/// Closed-form parameter counts by component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInventory {
    pub backbone: usize,
    pub side: usize,
    pub prompts: usize,
    pub fusion: usize,
    pub head: usize,
}

impl ParamInventory {
    pub fn learnable(&self) -> usize {
        self.side + self.prompts + self.fusion + self.head
    }

    pub fn total(&self) -> usize {
        self.backbone + self.learnable()
    }

    /// Learnable share of all parameters.
    pub fn ratio(&self) -> f64 {
        self.learnable() as f64 / self.total() as f64
    }
}

/// Parameter inventory of the model `mode` trains. Side-only runs carry no
/// backbone at all.
pub fn param_inventory(cfg: &FptConfig, mode: TrainMode, num_classes: usize) -> ParamInventory {
    let bb = &cfg.backbone;
    let pd = 3 * bb.patch_size * bb.patch_size;
    let backbone = if mode.uses_backbone() {
        let g = bb.pretrain_grid;
        pd * bb.dim + bb.dim + bb.dim + (1 + g * g) * bb.dim + bb.layers * block_params(bb.dim, bb.mlp_ratio)
    } else {
        0
    };
    let d = cfg.side_dim();
    let grid = cfg.side_resolution(mode) / bb.patch_size;
    let side = pd * d + d + d + (grid * grid + 1) * d + bb.layers * block_params(d, cfg.side.mlp_ratio) + 2 * d;
    let (prompts, fusion) = if mode.uses_backbone() {
        let sets = if cfg.side.shared_prompts { 1 } else { bb.layers };
        (
            sets * cfg.side.num_prompts * d,
            bb.layers * (d * bb.dim + bb.dim + bb.dim * d + d),
        )
    } else {
        (0, 0)
    };
    ParamInventory {
        backbone,
        side,
        prompts,
        fusion,
        head: d * num_classes + num_classes,
    }
}

/// Version of the activation-memory formula below.
pub const MEMORY_MODEL_VERSION: u32 = 1;

/// Training configuration whose retained activations are counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MemoryMode {
    /// Every backbone layer learnable at the high resolution.
    FullFineTune,
    /// Only a head on top of the frozen backbone's CLS token.
    LinearProbe,
    /// The side network alone at `resolution`.
    SideOnly { resolution: usize },
    /// Side network at `resolution` with fusion over a `ratio` share of tokens.
    Fpt { resolution: usize, ratio: f64 },
}

impl MemoryMode {
    pub fn for_train_mode(cfg: &FptConfig, mode: TrainMode) -> Self {
        let resolution = cfg.side_resolution(mode);
        match mode {
            TrainMode::SideOnly => MemoryMode::SideOnly { resolution },
            _ => MemoryMode::Fpt {
                resolution,
                ratio: cfg.effective_ratio(mode),
            },
        }
    }
}

/// Retained activations of one pre-norm block over `n` tokens, batch `b`:
/// block input, norm output, q/k/v, attention probabilities, merged heads,
/// residual, second norm output, and the MLP pre- and post-activation:
/// `b·(8·n·d + 2·n·r·d + h·n²)`.
pub fn block_memory(b: usize, n: usize, dim: usize, heads: usize, mlp_ratio: usize) -> u64 {
    (b * (8 * n * dim + 2 * n * mlp_ratio * dim + heads * n * n)) as u64
}

/// Retained activations of one fusion module: prompt rows entering `f_in`,
/// the frozen keys and values, queries, the `h·P·S` cross-attention map and
/// the merged output entering `f_out`:
/// `b·(P·d_S + 2·S·d_M + 2·P·d_M + h_M·P·S)`.
pub fn fusion_memory(b: usize, prompts: usize, kept: usize, side_dim: usize, dim: usize, heads: usize) -> u64 {
    (b * (prompts * side_dim + 2 * kept * dim + 2 * prompts * dim + heads * prompts * kept)) as u64
}

/// Patch-embedding input kept for its weight gradient: `b·n_patch·3p²`.
pub fn embed_memory(b: usize, n_patch: usize, patch: usize) -> u64 {
    (b * n_patch * 3 * patch * patch) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub version: u32,
    /// Elements stored during forward for use in backward.
    pub retained: u64,
    /// Peak elements alive at once inside the gradient-free frozen forward;
    /// never retained.
    pub frozen_transient: u64,
    pub breakdown: Vec<(String, u64)>,
}

/// Analytic retained-activation count for one training step.
pub fn estimate_activation_memory(cfg: &FptConfig, mode: MemoryMode, num_classes: usize) -> MemoryEstimate {
    let b = cfg.train.batch_size;
    let bb = &cfg.backbone;
    let n_m = bb.num_tokens();
    let patch = bb.patch_size;
    let mut parts: Vec<(String, u64)> = Vec::new();
    let frozen_layer = (b * (3 * n_m * bb.dim + bb.heads * n_m * n_m + n_m * bb.mlp_ratio * bb.dim)) as u64;
    let mut frozen_transient = 0;
    match mode {
        MemoryMode::FullFineTune => {
            parts.push(("embed".into(), embed_memory(b, n_m - 1, patch)));
            parts.push((
                "blocks".into(),
                bb.layers as u64 * block_memory(b, n_m, bb.dim, bb.heads, bb.mlp_ratio),
            ));
            parts.push(("head".into(), (b * (bb.dim + num_classes)) as u64));
        }
        MemoryMode::LinearProbe => {
            frozen_transient = frozen_layer;
            parts.push(("head".into(), (b * (bb.dim + num_classes)) as u64));
        }
        MemoryMode::SideOnly { resolution } | MemoryMode::Fpt { resolution, .. } => {
            let grid = resolution / patch;
            let n_s = grid * grid + 1;
            let d_s = cfg.side_dim();
            let (p, fusion) = match mode {
                MemoryMode::Fpt { ratio, .. } => {
                    frozen_transient = frozen_layer;
                    let mut c = cfg.clone();
                    c.selection.ratio = ratio;
                    let s = kept_tokens(&c);
                    let p = cfg.side.num_prompts;
                    (p, bb.layers as u64 * fusion_memory(b, p, s, d_s, bb.dim, bb.heads))
                }
                _ => (0, 0),
            };
            parts.push(("embed".into(), embed_memory(b, n_s - 1, patch)));
            parts.push((
                "blocks".into(),
                bb.layers as u64 * block_memory(b, n_s + p, d_s, cfg.side_heads(), cfg.side.mlp_ratio),
            ));
            if fusion > 0 {
                parts.push(("fusion".into(), fusion));
            }
            parts.push(("head".into(), (b * (d_s + num_classes)) as u64));
        }
    }
    MemoryEstimate {
        version: MEMORY_MODEL_VERSION,
        retained: parts.iter().map(|(_, v)| v).sum(),
        frozen_transient,
        breakdown: parts,
    }
}

fn efficiency(score: f64, ratio: f64, what: &str) -> Result<f64> {
    if !(ratio >= 0.0) || !ratio.is_finite() {
        return Err(FptError::Domain(format!("{what} ratio must be a non-negative number, got {ratio}")));
    }
    Ok(score * (-(ratio + 1.0).log10()).exp())
}

/// Performance discounted by the learnable-parameter ratio `r` (a fraction).
pub fn ppe(score: f64, r: f64) -> Result<f64> {
    efficiency(score, r, "parameter")
}

/// Performance discounted by the memory ratio against full fine-tuning.
pub fn pme(score: f64, m_mem: f64) -> Result<f64> {
    efficiency(score, m_mem, "memory")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// Mean AUC on a 0–100 scale.
    pub score: f64,
    pub r: f64,
    pub m_mem: f64,
    pub ppe: f64,
    pub pme: f64,
}

impl EfficiencyReport {
    pub fn new(score: f64, r: f64, m_mem: f64) -> Result<Self> {
        Ok(Self {
            score,
            r,
            m_mem,
            ppe: ppe(score, r)?,
            pme: pme(score, m_mem)?,
        })
    }
}

/// Mann–Whitney AUC of `scores` for the positives in `positive`; ties count
/// one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(FptError::Data("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FptError::UndefinedAuc("needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC over the classes present in `labels`. `scores` is
/// row-major `[n, num_classes]`.
pub fn macro_auc(scores: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() * num_classes {
        return Err(FptError::Data("score matrix does not match label count".into()));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(FptError::UndefinedAuc(format!(
            "split contains {} class(es); one-vs-rest AUC needs two",
            present.len()
        )));
    }
    let mut total = 0.0;
    for &c in &present {
        let col: Vec<f64> = (0..labels.len()).map(|i| scores[i * num_classes + c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += binary_auc(&col, &pos)?;
    }
    Ok(total / present.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{SideNetwork, SideShape};
    use fpt_numerics::Tensor;

    #[test]
    fn linear_layer_count() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros([3, 2]).with_requires_grad(true));
        s.add("b", Tensor::zeros([2]).with_requires_grad(true));
        assert_eq!(count_params(&s, true), 8);
        s.set_requires_grad(false);
        assert_eq!(count_params(&s, true), 0);
        assert_eq!(count_params(&s, false), 8);
    }

    #[test]
    fn auc_examples() {
        let auc = binary_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
        assert_eq!(binary_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert!(matches!(macro_auc(&[0.5, 0.5, 0.2, 0.8], 2, &[1, 1]), Err(FptError::UndefinedAuc(_))));
        let perfect = [0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.0, 0.1, 0.9];
        assert_eq!(macro_auc(&perfect, 3, &[0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn efficiency_edges() {
        assert_eq!(ppe(80.0, 0.0).unwrap(), 80.0);
        assert_eq!(pme(80.0, 0.0).unwrap(), 80.0);
        assert!(matches!(ppe(80.0, -0.1), Err(FptError::Domain(_))));
        assert!(matches!(pme(80.0, -0.1), Err(FptError::Domain(_))));
        assert!((ppe(93.96, 1.0).unwrap() - 69.54).abs() < 0.01);
        assert!((ppe(92.26, 0.0181).unwrap() - 91.54).abs() < 0.01);
        assert!((pme(92.26, 3182.0 / 24116.0).unwrap() - 87.42).abs() < 0.01);
        assert!((pme(88.30, 4364.0 / 24116.0).unwrap() - 82.15).abs() < 0.01);
    }

    #[test]
    fn inventory_matches_built_models() {
        let cfg = FptConfig::desk();
        for mode in TrainMode::ALL {
            let inv = param_inventory(&cfg, mode, 4);
            let side = SideNetwork::<f32>::new(SideShape::from_config(&cfg, mode, 4), 0).unwrap();
            assert_eq!(inv.learnable(), count_params(side.store(), true), "{mode:?}");
        }
        let bb = crate::backbone::Backbone::new(&cfg.backbone).unwrap();
        assert_eq!(param_inventory(&cfg, TrainMode::Fpt, 4).backbone, bb.num_params());
        assert_eq!(count_params(bb.weights(), true), 0);
    }

    #[test]
    fn one_side_block_closed_form() {
        let mut cfg = FptConfig::desk();
        cfg.backbone.layers = 1;
        cfg.train.batch_size = 2;
        let est = estimate_activation_memory(&cfg, MemoryMode::SideOnly { resolution: 32 }, 4);
        // n = 17 tokens, d = 8, h = 2, r = 4.
        let block = 2 * (8 * 17 * 8 + 2 * 17 * 4 * 8 + 2 * 17 * 17);
        let embed = 2 * 16 * 3 * 64;
        let head = 2 * (8 + 4);
        assert_eq!(est.retained, (block + embed + head) as u64);
    }

    #[test]
    fn prompt_count_enters_as_documented() {
        let cfg = FptConfig::desk();
        let mut doubled = cfg.clone();
        doubled.side.num_prompts *= 2;
        let mode = MemoryMode::Fpt { resolution: 32, ratio: 0.2 };
        let a = estimate_activation_memory(&cfg, mode, 4).retained as i64;
        let b = estimate_activation_memory(&doubled, mode, 4).retained as i64;
        let (bs, l, p, n_s, d_s, h_s, r) = (16i64, 4i64, 16i64, 17i64, 8i64, 2i64, 4i64);
        let (s, d_m, h_m) = (1 + 52i64, 64i64, 4i64);
        // Extra prompt rows in every side block, plus the prompt-linear fusion terms.
        let block_delta = bs * (8 * p * d_s + 2 * p * r * d_s + h_s * ((n_s + 2 * p).pow(2) - (n_s + p).pow(2)));
        let fusion_delta = bs * (p * d_s + 2 * p * d_m + h_m * p * s);
        assert_eq!(b - a, l * (block_delta + fusion_delta));
    }

    #[test]
    fn frozen_transient_does_not_grow_with_depth() {
        let cfg = FptConfig::desk();
        let mut deep = cfg.clone();
        deep.backbone.layers *= 3;
        let mode = MemoryMode::Fpt { resolution: 32, ratio: 0.2 };
        let a = estimate_activation_memory(&cfg, mode, 4);
        let b = estimate_activation_memory(&deep, mode, 4);
        assert_eq!(a.frozen_transient, b.frozen_transient);
        assert!(b.retained > a.retained);
    }
}
