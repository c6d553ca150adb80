//! Mini-batch loops, feature caching and seeded stream derivation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::StageConfig;
use crate::data::{batch_tensor, PreparedSample};
use crate::error::{Error, Result};
use crate::model::{features, AdapterSet, Backbone};
use crate::numerics::{Graph, OptimizerState, ParamId, ParamStore, Tensor, Var};

/// Independent deterministic stream for one purpose of one task.
pub fn stream(seed: u64, purpose: &str, task: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update((task as u64).to_le_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Sub-seed for APIs that take a plain integer seed.
pub fn sub_seed(seed: u64, purpose: &str, task: usize) -> u64 {
    stream(seed, purpose, task).random()
}

/// Work done by one training stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub task: usize,
    pub stage: String,
    pub epochs: usize,
    pub steps: u64,
    pub samples: u64,
}

/// Runs `cfg.epochs` passes over `n` items in shuffled mini-batches of
/// `batch`. `loss` builds the graph for one batch of item indices.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    store: &mut ParamStore<f32>,
    params: &[ParamId],
    cfg: &StageConfig,
    n: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
    stats: &mut StageStats,
    mut loss: impl FnMut(&mut Graph<f32>, &ParamStore<f32>, &[usize], &mut ChaCha8Rng) -> Result<Var>,
) -> Result<()> {
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, store, params)?;
    let schedule = cfg.schedule();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        opt.set_learning_rate(schedule.lr_at(epoch));
        order.shuffle(rng);
        for chunk in order.chunks(batch.max(1)) {
            let mut g = Graph::new();
            let l = loss(&mut g, store, chunk, rng)?;
            let value = g.value(l).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} loss at task {} epoch {epoch}",
                    stats.stage, stats.task
                )));
            }
            store.zero_grad();
            g.backward(l, store)?;
            opt.step(store)?;
            stats.steps += 1;
            stats.samples += chunk.len() as u64;
        }
        stats.epochs += 1;
    }
    store.zero_grad();
    Ok(())
}

/// One flip coin per sample, drawn from the training stream.
pub fn flip_coins(n: usize, augment: bool, rng: &mut impl Rng) -> Vec<bool> {
    (0..n).map(|_| augment && rng.random_bool(0.5)).collect()
}

/// Pooled features of `samples` (one view) without recording gradients.
pub fn extract_features(
    store: &ParamStore<f32>,
    backbone: &Backbone,
    adapters: Option<&AdapterSet>,
    samples: &[&PreparedSample],
    flip: bool,
    batch: usize,
) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let flips = vec![flip; chunk.len()];
        let mut g = Graph::new();
        let x = g.input(batch_tensor(chunk, Some(&flips))?);
        let f = features(&mut g, store, backbone, adapters, x)?;
        parts.push(g.value(f).clone());
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::stack(&refs, true)
}

/// Features of both views, so augmentation can be replayed from the cache.
pub struct FeatureCache {
    pub plain: Tensor<f32>,
    pub flipped: Tensor<f32>,
}

impl FeatureCache {
    pub fn build(
        store: &ParamStore<f32>,
        backbone: &Backbone,
        adapters: Option<&AdapterSet>,
        samples: &[&PreparedSample],
        augment: bool,
        batch: usize,
    ) -> Result<Self> {
        let plain = extract_features(store, backbone, adapters, samples, false, batch)?;
        let flipped = if augment {
            extract_features(store, backbone, adapters, samples, true, batch)?
        } else {
            plain.clone()
        };
        Ok(Self { plain, flipped })
    }

    /// `[idx.len(), d]` rows, each from the view selected by its coin.
    pub fn gather(&self, idx: &[usize], flips: &[bool]) -> Result<Tensor<f32>> {
        let (_, d) = self.plain.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for (&i, &f) in idx.iter().zip(flips) {
            let src = if f { &self.flipped } else { &self.plain };
            out.extend_from_slice(&src.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![idx.len(), d], out)
    }
}
