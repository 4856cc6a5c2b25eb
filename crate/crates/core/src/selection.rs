//! Attention-driven token selection on the frozen path.
//!
//! Tokens are scored by the attention they receive (column mean over heads and
//! queries), the top fraction of patch tokens is kept, and only their keys and
//! values go on to the fusion modules.

use fpt_numerics::{Real, Tensor};

use crate::backbone::LayerTap;
use crate::config::{SelectionConfig, SelectionScope};
use crate::error::{FptError, Result};

/// Bumped whenever the scoring or ranking rule changes; part of the cache key.
pub const SELECTION_RULE_VERSION: u32 = 1;

/// `[B, h, N, N]` attention → `[B, N]` mean attention received per token.
pub fn token_scores<T: Real>(attn: &Tensor<T>) -> Result<Tensor<T>> {
    let s = attn.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(FptError::Config(format!("expected [B, h, N, N] attention, got {s:?}")));
    }
    let (b, h, n) = (s[0], s[1], s[2]);
    let denom = T::lit((h * n) as f64);
    let mut out = vec![T::zero(); b * n];
    for bi in 0..b {
        let acc = &mut out[bi * n..(bi + 1) * n];
        for row in attn.data()[bi * h * n * n..(bi + 1) * h * n * n].chunks_exact(n) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / denom;
        }
    }
    Ok(Tensor::new([b, n], out)?)
}

/// Number of patch tokens kept from `candidates` at `ratio`: `ceil(ratio · n)`,
/// at least one. A small guard keeps products like `0.3 · 10` from rounding up.
pub fn kept_count(candidates: usize, ratio: f64) -> usize {
    if candidates == 0 {
        return 0;
    }
    (((ratio * candidates as f64) - 1e-9).ceil().max(1.0) as usize).min(candidates)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSelection {
    /// Kept token positions, strictly increasing.
    pub indices: Vec<usize>,
    pub scores: Vec<f32>,
    pub ratio: f64,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(FptError::Config(format!("selection ratio {ratio} outside (0, 1]")))
    }
}

/// Selects from one sample's scores. With `keep_cls`, token 0 is always kept
/// and the budget applies to the remaining tokens only. Ties go to the lower
/// index.
pub fn select_row(scores: &[f32], ratio: f64, keep_cls: bool) -> Result<TokenSelection> {
    check_ratio(ratio)?;
    let first = usize::from(keep_cls && !scores.is_empty());
    let mut candidates: Vec<usize> = (first..scores.len()).collect();
    let k = kept_count(candidates.len(), ratio);
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, order);
        candidates.truncate(k);
    }
    let mut indices: Vec<usize> = (0..first).chain(candidates).collect();
    indices.sort_unstable();
    Ok(TokenSelection {
        indices,
        scores: scores.to_vec(),
        ratio,
    })
}

/// Per-sample selections for a `[B, N]` score matrix.
pub fn select_topk(scores: &Tensor<f32>, ratio: f64, keep_cls: bool) -> Result<Vec<TokenSelection>> {
    check_ratio(ratio)?;
    let n = scores.shape().get(1).copied().unwrap_or(0);
    if n == 0 {
        return (0..scores.shape()[0]).map(|_| select_row(&[], ratio, keep_cls)).collect();
    }
    scores.data().chunks_exact(n).map(|row| select_row(row, ratio, keep_cls)).collect()
}

/// One sample's frozen keys and values at the kept tokens of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFusionFeatures {
    pub layer: usize,
    pub indices: Vec<u32>,
    /// `[S, h, d/h]`
    pub keys: Tensor<f32>,
    /// `[S, h, d/h]`
    pub values: Tensor<f32>,
}

impl LayerFusionFeatures {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Gathers `[B, h, N, dh]` rows of sample `b` into `[S, h, dh]`.
fn gather_rows(x: &Tensor<f32>, b: usize, indices: &[usize]) -> Tensor<f32> {
    let s = x.shape();
    let (h, n, dh) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(indices.len() * h * dh);
    for &j in indices {
        for head in 0..h {
            let at = ((b * h + head) * n + j) * dh;
            out.extend_from_slice(&x.data()[at..at + dh]);
        }
    }
    Tensor::new([indices.len(), h, dh], out).expect("gather shape")
}

/// Restricts sample `b` of `tap` to the selected tokens, preserving order.
pub fn gather_selected(tap: &LayerTap, b: usize, sel: &TokenSelection) -> Result<LayerFusionFeatures> {
    let n = tap.keys.shape()[2];
    if b >= tap.keys.shape()[0] {
        return Err(FptError::CacheLookup(format!("sample {b} outside batch of {}", tap.keys.shape()[0])));
    }
    if let Some(&bad) = sel.indices.iter().find(|&&j| j >= n) {
        return Err(fpt_numerics::NumericsError::Index(format!("token {bad} outside sequence of {n}")).into());
    }
    Ok(LayerFusionFeatures {
        layer: tap.layer,
        indices: sel.indices.iter().map(|&j| j as u32).collect(),
        keys: gather_rows(&tap.keys, b, &sel.indices),
        values: gather_rows(&tap.values, b, &sel.indices),
    })
}

/// Consumes backbone taps in layer order and produces per-sample, per-layer
/// fusion features under either selection scope.
pub struct FeatureCollector {
    cfg: SelectionConfig,
    batch: Option<usize>,
    /// Taps seen before the scoring layer under global scope.
    pending: Vec<LayerTap>,
    global: Option<Vec<TokenSelection>>,
    out: Vec<Vec<LayerFusionFeatures>>,
}

impl FeatureCollector {
    pub fn new(cfg: &SelectionConfig) -> Result<Self> {
        check_ratio(cfg.ratio)?;
        Ok(Self {
            cfg: cfg.clone(),
            batch: None,
            pending: Vec::new(),
            global: None,
            out: Vec::new(),
        })
    }

    fn gather_all(&mut self, tap: &LayerTap, sels: &[TokenSelection]) -> Result<()> {
        for (b, sel) in sels.iter().enumerate() {
            let f = gather_selected(tap, b, sel)?;
            self.out[b].push(f);
        }
        Ok(())
    }

    pub fn push(&mut self, mut tap: LayerTap) -> Result<()> {
        let b = tap.keys.shape()[0];
        if self.batch.is_none() {
            self.batch = Some(b);
            self.out = vec![Vec::new(); b];
        }
        let select = |tap: &LayerTap| -> Result<Vec<TokenSelection>> {
            select_topk(&token_scores(&tap.attn)?, self.cfg.ratio, self.cfg.keep_cls)
        };
        match self.cfg.scope {
            SelectionScope::PerLayer => {
                let sels = select(&tap)?;
                self.gather_all(&tap, &sels)
            }
            SelectionScope::Global { layer } => {
                if tap.layer == layer {
                    let sels = select(&tap)?;
                    for t in std::mem::take(&mut self.pending) {
                        self.gather_all(&t, &sels)?;
                    }
                    self.gather_all(&tap, &sels)?;
                    self.global = Some(sels);
                    Ok(())
                } else if let Some(sels) = self.global.take() {
                    let r = self.gather_all(&tap, &sels);
                    self.global = Some(sels);
                    r
                } else {
                    tap.attn = Tensor::zeros([0]);
                    tap.tokens = Tensor::zeros([0]);
                    self.pending.push(tap);
                    Ok(())
                }
            }
        }
    }

    /// Features indexed `[sample][layer]`.
    pub fn finish(self) -> Result<Vec<Vec<LayerFusionFeatures>>> {
        if !self.pending.is_empty() {
            return Err(FptError::Config("global selection layer was never reached".into()));
        }
        Ok(self.out)
    }
}

/// Convenience wrapper over [`FeatureCollector`] for an in-memory tap list.
pub fn collect_features(taps: Vec<LayerTap>, cfg: &SelectionConfig) -> Result<Vec<Vec<LayerFusionFeatures>>> {
    let mut c = FeatureCollector::new(cfg)?;
    for t in taps {
        c.push(t)?;
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let map = Tensor::new([1, 1, 2, 2], vec![0.6f64, 0.4, 0.2, 0.8]).unwrap();
        let s = token_scores(&map).unwrap();
        assert!((s.data()[0] - 0.4).abs() < 1e-12 && (s.data()[1] - 0.6).abs() < 1e-12);
        let uni = Tensor::full([2, 3, 5, 5], 0.2f64);
        assert!(token_scores(&uni).unwrap().data().iter().all(|v| (v - 0.2).abs() < 1e-12));
        let two = Tensor::new([1, 2, 2, 2], vec![0.6f64, 0.4, 0.2, 0.8, 0.6, 0.4, 0.2, 0.8]).unwrap();
        let both = token_scores(&two).unwrap();
        assert!(both.data().iter().zip(s.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn select_examples() {
        let sel = select_row(&[0.4, 0.1, 0.3, 0.2], 0.5, false).unwrap();
        assert_eq!(sel.indices, vec![0, 2]);
        let all = select_row(&[0.1, 0.9, 0.5], 1.0, true).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2]);
        let scores: Vec<f32> = (0..1025).map(|i| ((i * 37) % 101) as f32).collect();
        assert_eq!(select_row(&scores, 0.2, true).unwrap().indices.len(), 206);
        assert!(select_row(&scores, 0.0, true).is_err());
        assert!(select_row(&scores, 1.01, true).is_err());
    }

    #[test]
    fn ceiling_guard() {
        assert_eq!(kept_count(10, 0.3), 3);
        assert_eq!(kept_count(10, 0.7), 7);
        assert_eq!(kept_count(1024, 0.2), 205);
        assert_eq!(kept_count(7, 0.01), 1);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let sel = select_row(&[0.0, 0.5, 0.5, 0.5, 0.1], 0.5, true).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    fn tap(b: usize, h: usize, n: usize, dh: usize) -> LayerTap {
        LayerTap {
            layer: 3,
            tokens: Tensor::zeros([b, n, h * dh]),
            attn: Tensor::full([b, h, n, n], 1.0 / n as f32),
            keys: Tensor::from_fn([b, h, n, dh], |i| i as f32),
            values: Tensor::from_fn([b, h, n, dh], |i| -(i as f32)),
        }
    }

    #[test]
    fn gather_identity_and_singleton() {
        let t = tap(1, 2, 4, 3);
        let all = TokenSelection {
            indices: vec![0, 1, 2, 3],
            scores: vec![],
            ratio: 1.0,
        };
        let f = gather_selected(&t, 0, &all).unwrap();
        assert_eq!(f.keys.data().len(), t.keys.numel());
        assert_eq!(f.keys.shape(), &[4, 2, 3]);
        assert_eq!(f.keys.data()[3..6], t.keys.data()[12..15]);
        let one = TokenSelection {
            indices: vec![0],
            ..all.clone()
        };
        let f = gather_selected(&t, 0, &one).unwrap();
        assert_eq!(f.values.data(), &[-0.0, -1.0, -2.0, -12.0, -13.0, -14.0]);
        let bad = TokenSelection {
            indices: vec![4],
            ..all
        };
        assert!(gather_selected(&t, 0, &bad).is_err());
    }

    #[test]
    fn global_scope_reuses_one_selection() {
        let mut taps: Vec<LayerTap> = (0..3)
            .map(|l| {
                let mut t = tap(2, 1, 5, 2);
                t.layer = l;
                t
            })
            .collect();
        // Only layer 1 has a peaked map, on token 4.
        taps[1].attn = Tensor::from_fn([2, 1, 5, 5], |i| if i % 5 == 4 { 1.0 } else { 0.0 });
        let cfg = SelectionConfig {
            ratio: 0.25,
            keep_cls: true,
            scope: SelectionScope::Global { layer: 1 },
        };
        let f = collect_features(taps, &cfg).unwrap();
        assert_eq!(f.len(), 2);
        for per_sample in &f {
            assert_eq!(per_sample.len(), 3);
            for (l, lf) in per_sample.iter().enumerate() {
                assert_eq!(lf.layer, l);
                assert_eq!(lf.indices, vec![0, 4]);
            }
        }
    }
}
