//! Running-mean merging of per-task adapter weights.
//!
//! The merged adapter for block `j` after `t` tasks is the elementwise mean
//! of the `t` task adapters for that block. [`MergeState`] keeps both the
//! archive of task adapters and the incrementally updated mean.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{AdapterSet, AdapterWeights, BlockAdapterWeights, Checkpoint};
use crate::numerics::{ParamStore, Real, Tensor};

fn check_congruent<T: Real>(a: &AdapterWeights<T>, b: &AdapterWeights<T>, which: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err!(
            "adapter set {which} has {} blocks, expected {}",
            b.len(),
            a.len()
        ));
    }
    for (j, (x, y)) in a.iter().zip(b).enumerate() {
        for ((name, s), t) in BlockAdapterWeights::<T>::TENSOR_NAMES
            .iter()
            .zip(x.tensors())
            .zip(y.tensors())
        {
            if s.shape() != t.shape() {
                return Err(shape_err!(
                    "adapter set {which}, block {}, tensor {name}: shape {:?} does not match {:?}",
                    j + 1,
                    t.shape(),
                    s.shape()
                ));
            }
        }
    }
    Ok(())
}

fn zip_map<T: Real>(
    sets: &[&AdapterWeights<T>],
    f: impl Fn(&[f64]) -> f64,
) -> AdapterWeights<T> {
    let mut out = sets[0].clone();
    let mut column = vec![0.0; sets.len()];
    for (j, block) in out.iter_mut().enumerate() {
        for (k, tensor) in block.tensors_mut().into_iter().enumerate() {
            for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                for (c, s) in column.iter_mut().zip(sets) {
                    *c = s[j].tensors()[k].data()[i].as_f64();
                }
                *v = T::lit(f(&column));
            }
        }
    }
    out
}

/// Elementwise mean over the archive, summed in archive order in f64.
pub fn merge_batch<T: Real>(archive: &[AdapterWeights<T>]) -> Result<AdapterWeights<T>> {
    let first = archive
        .first()
        .ok_or_else(|| invalid!("cannot merge an empty adapter archive"))?;
    for (n, w) in archive.iter().enumerate().skip(1) {
        check_congruent(first, w, n + 1)?;
    }
    let refs: Vec<&AdapterWeights<T>> = archive.iter().collect();
    let t = archive.len() as f64;
    Ok(zip_map(&refs, |col| col.iter().sum::<f64>() / t))
}

fn cast_weights<A: Real, B: Real>(w: &AdapterWeights<A>) -> AdapterWeights<B> {
    w.iter()
        .map(|b| BlockAdapterWeights {
            down_weight: b.down_weight.cast(),
            down_bias: b.down_bias.cast(),
            up_weight: b.up_weight.cast(),
            up_bias: b.up_bias.cast(),
        })
        .collect()
}

/// Number of tasks merged, the current mean and the per-task archive.
///
/// The running mean is carried in f64 and rounded to `T` only for use, so
/// rounding does not compound across tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeState<T = f32> {
    mean: Option<AdapterWeights<f64>>,
    merged: Option<AdapterWeights<T>>,
    archive: Vec<AdapterWeights<T>>,
}

impl<T: Real> Default for MergeState<T> {
    fn default() -> Self {
        Self {
            mean: None,
            merged: None,
            archive: Vec::new(),
        }
    }
}

impl<T: Real> MergeState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn t(&self) -> usize {
        self.archive.len()
    }

    pub fn merged(&self) -> Option<&AdapterWeights<T>> {
        self.merged.as_ref()
    }

    pub fn archive(&self) -> &[AdapterWeights<T>] {
        &self.archive
    }

    /// `merged ← (t·merged + w)/(t+1)`, then appends `w` to the archive.
    pub fn merge_incremental(&mut self, w: AdapterWeights<T>) -> Result<()> {
        let next = match &self.mean {
            None => {
                if w.is_empty() {
                    return Err(invalid!("cannot merge an adapter set with no blocks"));
                }
                cast_weights(&w)
            }
            Some(prev) => {
                check_congruent(&self.archive[0], &w, self.t() + 1)?;
                let t = self.t() as f64;
                zip_map(&[prev, &cast_weights(&w)], |c| (t * c[0] + c[1]) / (t + 1.0))
            }
        };
        self.merged = Some(cast_weights(&next));
        self.mean = Some(next);
        self.archive.push(w);
        Ok(())
    }

    /// Loads the current mean into `target` and freezes it.
    pub fn freeze_merged(&self, store: &mut ParamStore<T>, target: &AdapterSet) -> Result<()> {
        let merged = self
            .merged
            .as_ref()
            .ok_or_else(|| invalid!("no adapters merged yet"))?;
        target.unfreeze(store);
        let loaded = target.load(store, merged);
        target.freeze(store);
        loaded
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub task_id: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub tasks: Vec<ArchiveEntry>,
}

pub const ARCHIVE_MANIFEST: &str = "manifest.json";

fn weights_checkpoint(w: &AdapterWeights<f32>, task: usize) -> Checkpoint {
    let mut tensors = Vec::new();
    for (j, block) in w.iter().enumerate() {
        for (name, t) in BlockAdapterWeights::<f32>::TENSOR_NAMES.iter().zip(block.tensors()) {
            tensors.push((format!("block{}.{name}", j + 1), t.clone()));
        }
    }
    Checkpoint {
        merge_count: task as u32,
        classes: Vec::new(),
        tensors,
    }
}

fn checkpoint_weights(ck: &Checkpoint, path: &Path) -> Result<AdapterWeights<f32>> {
    let names = BlockAdapterWeights::<f32>::TENSOR_NAMES;
    if !ck.tensors.len().is_multiple_of(names.len()) || ck.tensors.is_empty() {
        return Err(invalid!(
            "{}: {} tensors is not a whole number of adapter blocks",
            path.display(),
            ck.tensors.len()
        ));
    }
    let blocks = ck.tensors.len() / names.len();
    (0..blocks)
        .map(|j| {
            let get = |n: &str| -> Result<Tensor<f32>> {
                let key = format!("block{}.{n}", j + 1);
                ck.get(&key)
                    .cloned()
                    .ok_or_else(|| invalid!("{}: missing tensor `{key}`", path.display()))
            };
            Ok(BlockAdapterWeights {
                down_weight: get(names[0])?,
                down_bias: get(names[1])?,
                up_weight: get(names[2])?,
                up_bias: get(names[3])?,
            })
        })
        .collect()
}

impl MergeState<f32> {
    /// Writes `task_NNN.ckpt` per archived set plus a hash manifest.
    pub fn save_archive(&self, dir: &Path) -> Result<ArchiveManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut tasks = Vec::new();
        for (n, w) in self.archive.iter().enumerate() {
            let file = format!("task_{:03}.ckpt", n + 1);
            let bytes = weights_checkpoint(w, n + 1).to_bytes();
            let path = dir.join(&file);
            std::fs::write(&path, &bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            tasks.push(ArchiveEntry {
                task_id: n + 1,
                file,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = ArchiveManifest { tasks };
        let path = dir.join(ARCHIVE_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(manifest)
    }

    /// Rebuilds the state from an archive directory, verifying hashes.
    pub fn load_archive(dir: &Path) -> Result<Self> {
        let path = dir.join(ARCHIVE_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let manifest: ArchiveManifest = serde_json::from_str(&text)?;
        let mut state = Self::new();
        for (n, entry) in manifest.tasks.iter().enumerate() {
            if entry.task_id != n + 1 {
                return Err(invalid!("archive manifest lists task {} at position {}", entry.task_id, n + 1));
            }
            let p = dir.join(&entry.file);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            let hash = hex::encode(Sha256::digest(&bytes));
            if hash != entry.sha256 {
                return Err(invalid!("{}: content hash {hash} does not match manifest", p.display()));
            }
            state.merge_incremental(checkpoint_weights(&Checkpoint::from_bytes(&bytes, &p)?, &p)?)?;
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, BackboneSpec};
    use crate::numerics::{Graph, OptimizerKind, OptimizerState};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, blocks: &[(usize, usize)]) -> AdapterWeights<f32> {
        blocks
            .iter()
            .map(|&(c, h)| {
                let mut t = |s: &[usize]| Tensor::from_fn(s, |_| rng.random_range(-1.0f32..1.0));
                BlockAdapterWeights {
                    down_weight: t(&[h, c, 1, 1]),
                    down_bias: t(&[h]),
                    up_weight: t(&[c, h, 1, 1]),
                    up_bias: t(&[c]),
                }
            })
            .collect()
    }

    fn flat(w: &AdapterWeights<f32>) -> Vec<f32> {
        w.iter()
            .flat_map(|b| b.tensors().into_iter().flat_map(|t| t.data().to_vec()))
            .collect()
    }

    fn to_f64(w: &AdapterWeights<f32>) -> AdapterWeights<f64> {
        w.iter()
            .map(|b| BlockAdapterWeights {
                down_weight: b.down_weight.cast(),
                down_bias: b.down_bias.cast(),
                up_weight: b.up_weight.cast(),
                up_bias: b.up_bias.cast(),
            })
            .collect()
    }

    const BLOCKS: [(usize, usize); 2] = [(4, 2), (8, 2)];

    #[test]
    fn single_set_and_identical_sets_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_set(&mut rng, &BLOCKS);
        assert_eq!(merge_batch(std::slice::from_ref(&w)).unwrap(), w);
        assert_eq!(merge_batch(&vec![w.clone(); 7]).unwrap(), w);
        let mut s = MergeState::new();
        for _ in 0..7 {
            s.merge_incremental(w.clone()).unwrap();
            assert_eq!(s.merged().unwrap(), &w);
        }
    }

    #[test]
    fn two_point_mean() {
        let mk = |v: f32| {
            vec![BlockAdapterWeights {
                down_weight: Tensor::full(&[1, 1, 1, 1], v),
                down_bias: Tensor::full(&[1], v),
                up_weight: Tensor::full(&[1, 1, 1, 1], v),
                up_bias: Tensor::full(&[1], v),
            }]
        };
        let mut s = MergeState::new();
        s.merge_incremental(mk(0.0)).unwrap();
        s.merge_incremental(mk(2.0)).unwrap();
        assert_eq!(s.merged().unwrap(), &mk(1.0));
        assert_eq!(s.t(), 2);
    }

    #[test]
    fn batch_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sets: Vec<_> = (0..3).map(|_| random_set(&mut rng, &BLOCKS)).collect();
        let merged = flat(&merge_batch(&sets).unwrap());
        let f: Vec<Vec<f32>> = sets.iter().map(flat).collect();
        for (i, m) in merged.iter().enumerate() {
            let expect = (f[0][i] as f64 + f[1][i] as f64 + f[2][i] as f64) / 3.0;
            assert!((*m as f64 - expect).abs() <= 1e-7 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_names_block_and_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_set(&mut rng, &BLOCKS);
        let b = random_set(&mut rng, &[(4, 2), (8, 4)]);
        let msg = merge_batch(&[a.clone(), b.clone()]).unwrap_err().to_string();
        assert!(msg.contains("block 2") && msg.contains("down.weight"), "{msg}");
        let mut s = MergeState::new();
        s.merge_incremental(a).unwrap();
        assert!(s.merge_incremental(b).is_err());
        assert_eq!(s.t(), 1);
        assert!(merge_batch::<f32>(&[]).is_err());
    }

    #[test]
    fn freeze_rejects_empty_state_and_optimizer_registration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let spec = BackboneSpec {
            in_channels: 1,
            image_size: 8,
            channels: vec![4, 8],
            kernel: 3,
        };
        let bb = Backbone::new(&mut store, spec, &mut rng).unwrap();
        let target = AdapterSet::new(&mut store, "merged", 0, &bb, 2, &mut rng).unwrap();
        let state = MergeState::<f32>::new();
        assert!(state.freeze_merged(&mut store, &target).is_err());

        let mut state = MergeState::new();
        let w = random_set(&mut rng, &[(4, 2), (8, 4)]);
        state.merge_incremental(w.clone()).unwrap();
        state.freeze_merged(&mut store, &target).unwrap();
        assert_eq!(target.weights(&store), w);
        let err = OptimizerState::new(OptimizerKind::adam(), 0.1, &store, &target.params()).unwrap_err();
        assert!(err.to_string().contains("merged.block1.down.weight"), "{err}");

        // frozen forward equals a mutable copy with the same weights
        let copy = AdapterSet::new(&mut store, "copy", 0, &bb, 2, &mut rng).unwrap();
        copy.load(&mut store, &w).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(0.0..1.0)));
        let a = crate::model::features(&mut g, &store, &bb, Some(&target), x).unwrap();
        let b = crate::model::features(&mut g, &store, &bb, Some(&copy), x).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn archive_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = MergeState::new();
        for _ in 0..3 {
            s.merge_incremental(random_set(&mut rng, &BLOCKS)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let manifest = s.save_archive(dir.path()).unwrap();
        assert_eq!(manifest.tasks.len(), 3);
        let back = MergeState::load_archive(dir.path()).unwrap();
        assert_eq!(back.archive(), s.archive());
        assert_eq!(back.merged(), s.merged());

        std::fs::write(dir.path().join("task_002.ckpt"), b"garbage").unwrap();
        assert!(MergeState::load_archive(dir.path()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn incremental_equals_batch(seed in any::<u64>(), t in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets: Vec<_> = (0..t).map(|_| random_set(&mut rng, &BLOCKS)).collect();
            let mut s = MergeState::new();
            for w in &sets {
                s.merge_incremental(w.clone()).unwrap();
            }
            let batch = flat(&merge_batch(&sets).unwrap());
            for (a, b) in flat(s.merged().unwrap()).iter().zip(&batch) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }

        #[test]
        fn permutation_invariance(seed in any::<u64>(), t in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sets: Vec<_> = (0..t).map(|_| random_set(&mut rng, &BLOCKS)).collect();
            let a = flat(&merge_batch(&sets).unwrap());
            sets.reverse();
            sets.rotate_left(1);
            let b = flat(&merge_batch(&sets).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
            }
        }

        #[test]
        fn convexity(seed in any::<u64>(), t in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets: Vec<_> = (0..t).map(|_| random_set(&mut rng, &BLOCKS)).collect();
            let f: Vec<Vec<f32>> = sets.iter().map(flat).collect();
            for (i, m) in flat(&merge_batch(&sets).unwrap()).iter().enumerate() {
                let lo = f.iter().map(|v| v[i]).fold(f32::INFINITY, f32::min);
                let hi = f.iter().map(|v| v[i]).fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(lo <= *m && *m <= hi);
            }
        }

        #[test]
        fn linearity(seed in any::<u64>(), t in 1usize..6, a in -4.0f32..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets: Vec<_> = (0..t).map(|_| random_set(&mut rng, &BLOCKS)).collect();
            // evaluated in f64 so the 1e-7 bound measures the merge, not f32 rounding
            let sets: Vec<AdapterWeights<f64>> = sets.iter().map(to_f64).collect();
            let a = a as f64;
            let scaled: Vec<AdapterWeights<f64>> = sets
                .iter()
                .map(|w| {
                    let mut w = w.clone();
                    for b in &mut w {
                        for t in b.tensors_mut() {
                            t.data_mut().iter_mut().for_each(|v| *v *= a);
                        }
                    }
                    w
                })
                .collect();
            let lhs = merge_batch(&scaled).unwrap();
            let rhs = merge_batch(&sets).unwrap();
            for (bl, br) in lhs.iter().zip(&rhs) {
                for (tl, tr) in bl.tensors().into_iter().zip(br.tensors()) {
                    for (x, y) in tl.data().iter().zip(tr.data()) {
                        let y = y * a;
                        prop_assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
                    }
                }
            }
        }
    }
}
