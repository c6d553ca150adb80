//! Adapter-augmented convolutional backbone and classification heads.
//!
//! Every block is `3×3 conv → relu → 2×2 max-pool`. An adapter attached to
//! block `j` reads the block output `h` and contributes a residual:
//! `h + up(relu(down(h)))` with 1×1 bottleneck convolutions.

mod checkpoint;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::ClassId;
use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            channels: vec![16, 32, 64, 128],
            kernel: 3,
        }
    }
}

impl BackboneSpec {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    /// Spatial side length after block `j` (0-based).
    pub fn side_after(&self, j: usize) -> usize {
        self.image_size >> (j + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(invalid!("backbone needs at least one block with positive channels"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid!("backbone kernel must be odd, got {}", self.kernel));
        }
        if self.image_size >> self.channels.len() == 0 {
            return Err(invalid!(
                "image size {} too small for {} pooling blocks",
                self.image_size,
                self.channels.len()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneBlock {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Stack of convolutional blocks with an execution counter for pass accounting.
#[derive(Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    blocks: Vec<BackboneBlock>,
    executions: AtomicUsize,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            blocks: self.blocks.clone(),
            executions: AtomicUsize::new(self.executions.load(Ordering::Relaxed)),
        }
    }
}

impl Backbone {
    /// Allocates block parameters under `backbone.block{j}.conv.*` with
    /// He-uniform weights and zero biases.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        spec: BackboneSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.channels.len());
        let mut c_in = spec.in_channels;
        for (j, &c_out) in spec.channels.iter().enumerate() {
            let k = spec.kernel;
            let bound = (6.0 / (c_in * k * k) as f64).sqrt();
            let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| {
                T::lit(rng.random_range(-bound..bound))
            });
            let weight = store.add(format!("backbone.block{}.conv.weight", j + 1), w)?;
            let bias = store.add(
                format!("backbone.block{}.conv.bias", j + 1),
                Tensor::zeros(&[c_out]),
            )?;
            blocks.push(BackboneBlock {
                index: j,
                in_channels: c_in,
                out_channels: c_out,
                weight,
                bias,
            });
            c_in = c_out;
        }
        Ok(Self {
            spec,
            blocks,
            executions: AtomicUsize::new(0),
        })
    }

    /// Rebinds to parameters already present in `store` (e.g. after loading a checkpoint).
    pub fn attach<T: Real>(store: &ParamStore<T>, spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::new();
        let mut c_in = spec.in_channels;
        for (j, &c_out) in spec.channels.iter().enumerate() {
            let find = |suffix: &str| {
                let name = format!("backbone.block{}.conv.{suffix}", j + 1);
                store.id(&name).ok_or_else(|| invalid!("missing parameter `{name}`"))
            };
            let (weight, bias) = (find("weight")?, find("bias")?);
            let expect = [c_out, c_in, spec.kernel, spec.kernel];
            if store.value(weight).shape() != expect {
                return Err(shape_err!(
                    "block {} weight has shape {:?}, expected {expect:?}",
                    j + 1,
                    store.value(weight).shape()
                ));
            }
            blocks.push(BackboneBlock {
                index: j,
                in_channels: c_in,
                out_channels: c_out,
                weight,
                bias,
            });
            c_in = c_out;
        }
        Ok(Self {
            spec,
            blocks,
            executions: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[BackboneBlock] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.weight, b.bias]).collect()
    }

    pub fn freeze<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.params() {
            store.freeze(id);
        }
    }

    pub fn unfreeze<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.params() {
            store.unfreeze(id);
        }
    }

    /// Total block executions since construction or the last reset.
    pub fn block_executions(&self) -> usize {
        self.executions.load(Ordering::SeqCst)
    }

    pub fn reset_block_executions(&self) {
        self.executions.store(0, Ordering::SeqCst);
    }

    /// `maxpool2(relu(conv(x)))` for block `j` (0-based).
    pub fn block_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        j: usize,
        x: Var,
    ) -> Result<Var> {
        let block = self
            .blocks
            .get(j)
            .ok_or_else(|| invalid!("block index {j} out of range"))?;
        self.executions.fetch_add(1, Ordering::SeqCst);
        let w = g.param(store, block.weight);
        let b = g.param(store, block.bias);
        let y = g.conv2d(x, w, Some(b), 1, self.spec.kernel / 2)?;
        let y = g.relu(y);
        g.max_pool2d(y, 2)
    }
}

/// Bottleneck adapter for one block of one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adapter {
    pub task: usize,
    pub block: usize,
    pub channels: usize,
    pub ratio: usize,
    pub down_weight: ParamId,
    pub down_bias: ParamId,
    pub up_weight: ParamId,
    pub up_bias: ParamId,
}

impl Adapter {
    /// Fresh adapter: fan-in uniform down projection, zero up projection, so
    /// the residual branch starts as an exact no-op.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        task: usize,
        block: usize,
        channels: usize,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(invalid!(
                "adapter ratio {ratio} does not divide {channels} channels of block {}",
                block + 1
            ));
        }
        let hidden = channels / ratio;
        let bound = 1.0 / (channels as f64).sqrt();
        let down = Tensor::from_fn(&[hidden, channels, 1, 1], |_| {
            T::lit(rng.random_range(-bound..bound))
        });
        let name = |s: &str| format!("{prefix}.block{}.{s}", block + 1);
        Ok(Self {
            task,
            block,
            channels,
            ratio,
            down_weight: store.add(name("down.weight"), down)?,
            down_bias: store.add(name("down.bias"), Tensor::zeros(&[hidden]))?,
            up_weight: store.add(name("up.weight"), Tensor::zeros(&[channels, hidden, 1, 1]))?,
            up_bias: store.add(name("up.bias"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.ratio
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.down_weight, self.down_bias, self.up_weight, self.up_bias]
    }

    /// Residual branch `up(relu(down(h)))`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let dw = g.param(store, self.down_weight);
        let db = g.param(store, self.down_bias);
        let z = g.conv2d(h, dw, Some(db), 1, 0)?;
        let z = g.relu(z);
        let uw = g.param(store, self.up_weight);
        let ub = g.param(store, self.up_bias);
        g.conv2d(z, uw, Some(ub), 1, 0)
    }

    pub fn weights<T: Real>(&self, store: &ParamStore<T>) -> BlockAdapterWeights<T> {
        BlockAdapterWeights {
            down_weight: store.value(self.down_weight).clone(),
            down_bias: store.value(self.down_bias).clone(),
            up_weight: store.value(self.up_weight).clone(),
            up_bias: store.value(self.up_bias).clone(),
        }
    }

    pub fn load<T: Real>(&self, store: &mut ParamStore<T>, w: &BlockAdapterWeights<T>) -> Result<()> {
        store.load_value(self.down_weight, w.down_weight.clone())?;
        store.load_value(self.down_bias, w.down_bias.clone())?;
        store.load_value(self.up_weight, w.up_weight.clone())?;
        store.load_value(self.up_bias, w.up_bias.clone())
    }
}

/// Plain tensor copy of one adapter's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAdapterWeights<T = f32> {
    pub down_weight: Tensor<T>,
    pub down_bias: Tensor<T>,
    pub up_weight: Tensor<T>,
    pub up_bias: Tensor<T>,
}

impl<T: Real> BlockAdapterWeights<T> {
    pub const TENSOR_NAMES: [&'static str; 4] =
        ["down.weight", "down.bias", "up.weight", "up.bias"];

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.down_weight, &self.down_bias, &self.up_weight, &self.up_bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.down_weight,
            &mut self.down_bias,
            &mut self.up_weight,
            &mut self.up_bias,
        ]
    }
}

/// One adapter weight set per backbone block.
pub type AdapterWeights<T = f32> = Vec<BlockAdapterWeights<T>>;

/// One adapter per backbone block, all belonging to the same task (or the merge).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterSet {
    pub adapters: Vec<Adapter>,
}

impl AdapterSet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        task: usize,
        backbone: &Backbone,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let adapters = backbone
            .blocks()
            .iter()
            .map(|b| Adapter::new(store, prefix, task, b.index, b.out_channels, ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Self { adapters })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.adapters.iter().flat_map(|a| a.params()).collect()
    }

    pub fn weights<T: Real>(&self, store: &ParamStore<T>) -> AdapterWeights<T> {
        self.adapters.iter().map(|a| a.weights(store)).collect()
    }

    pub fn load<T: Real>(&self, store: &mut ParamStore<T>, w: &AdapterWeights<T>) -> Result<()> {
        if w.len() != self.adapters.len() {
            return Err(shape_err!(
                "adapter set has {} blocks, weights have {}",
                self.adapters.len(),
                w.len()
            ));
        }
        for (a, bw) in self.adapters.iter().zip(w) {
            a.load(store, bw)?;
        }
        Ok(())
    }

    pub fn freeze<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.params() {
            store.freeze(id);
        }
    }

    pub fn unfreeze<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.params() {
            store.unfreeze(id);
        }
    }
}

/// `h + A(h)` where `h = block_j(x)`.
pub fn block_forward_with_adapter<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    backbone: &Backbone,
    adapter: &Adapter,
    x: Var,
) -> Result<Var> {
    let h = backbone.block_forward(g, store, adapter.block, x)?;
    if g.value(h).shape()[1] != adapter.channels {
        return Err(shape_err!(
            "adapter expects {} channels, block {} produced {:?}",
            adapter.channels,
            adapter.block + 1,
            g.value(h).shape()
        ));
    }
    let r = adapter.forward(g, store, h)?;
    g.add(h, r)
}

/// Pooled `[N, d]` features through every block, with one adapter per block
/// when `adapters` is given.
pub fn features<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    backbone: &Backbone,
    adapters: Option<&AdapterSet>,
    x: Var,
) -> Result<Var> {
    if let Some(set) = adapters {
        if set.len() != backbone.num_blocks() {
            return Err(invalid!(
                "{} adapters for {} backbone blocks",
                set.len(),
                backbone.num_blocks()
            ));
        }
    }
    let mut h = x;
    for j in 0..backbone.num_blocks() {
        h = match adapters {
            Some(set) => block_forward_with_adapter(g, store, backbone, &set.adapters[j], h)?,
            None => backbone.block_forward(g, store, j, h)?,
        };
    }
    g.global_avg_pool(h)
}

/// One backbone traversal with the merged adapters, then the unified head.
pub fn forward_single_pass<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    backbone: &Backbone,
    merged: &AdapterSet,
    head: &UnifiedHead,
    x: Var,
) -> Result<Var> {
    if merged.len() != backbone.num_blocks() {
        return Err(invalid!(
            "merged adapters cover {} of {} blocks",
            merged.len(),
            backbone.num_blocks()
        ));
    }
    let f = features(g, store, backbone, Some(merged), x)?;
    head.forward(g, store, f)
}

/// Linear classifier over one task's classes plus a trailing "other" output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskHead {
    pub task: usize,
    pub classes: Vec<ClassId>,
    pub feature_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TaskHead {
    /// Zero-initialised head with `classes.len() + 1` outputs.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        task: usize,
        feature_dim: usize,
        classes: &[ClassId],
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(invalid!("task head needs a positive feature dimension"));
        }
        if classes.is_empty() {
            return Err(invalid!("task head needs at least one class"));
        }
        let width = classes.len() + 1;
        Ok(Self {
            task,
            classes: classes.to_vec(),
            feature_dim,
            weight: store.add(format!("{prefix}.weight"), Tensor::zeros(&[width, feature_dim]))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn width(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn other_index(&self) -> usize {
        self.classes.len()
    }

    /// Output index for `class`, or the "other" index when it is not in this task.
    pub fn local_label(&self, class: ClassId) -> usize {
        self.classes
            .iter()
            .position(|&c| c == class)
            .unwrap_or(self.other_index())
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(f, w, Some(b))
    }
}

/// Expandable classifier over every class seen so far.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedHead {
    classes: Vec<ClassId>,
    pub feature_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UnifiedHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        feature_dim: usize,
        classes: &[ClassId],
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(invalid!("unified head needs a positive feature dimension"));
        }
        if classes.is_empty() {
            return Err(invalid!("unified head needs at least one class"));
        }
        check_disjoint(&[], classes)?;
        let width = classes.len();
        Ok(Self {
            classes: classes.to_vec(),
            feature_dim,
            weight: store.add(format!("{prefix}.weight"), Tensor::zeros(&[width, feature_dim]))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[width]))?,
        })
    }

    /// Rebinds to `{prefix}.weight` / `{prefix}.bias` already in `store`.
    pub fn attach<T: Real>(store: &ParamStore<T>, prefix: &str, classes: &[ClassId]) -> Result<Self> {
        let find = |s: &str| {
            let name = format!("{prefix}.{s}");
            store.id(&name).ok_or_else(|| invalid!("missing parameter `{name}`"))
        };
        let (weight, bias) = (find("weight")?, find("bias")?);
        let (rows, d) = store.value(weight).dims2()?;
        if rows != classes.len() {
            return Err(shape_err!("head has {rows} rows for {} classes", classes.len()));
        }
        Ok(Self {
            classes: classes.to_vec(),
            feature_dim: d,
            weight,
            bias,
        })
    }

    /// Global class id of each output slot.
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn width(&self) -> usize {
        self.classes.len()
    }

    pub fn slot_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Appends zero rows for `new_classes`; existing rows are copied unchanged.
    pub fn expand<T: Real>(&mut self, store: &mut ParamStore<T>, new_classes: &[ClassId]) -> Result<()> {
        check_disjoint(&self.classes, new_classes)?;
        if new_classes.is_empty() {
            return Ok(());
        }
        let d = self.feature_dim;
        let width = self.classes.len() + new_classes.len();
        let mut w = store.value(self.weight).data().to_vec();
        w.resize(width * d, T::zero());
        let mut b = store.value(self.bias).data().to_vec();
        b.resize(width, T::zero());
        store.set_value(self.weight, Tensor::new(vec![width, d], w)?)?;
        store.set_value(self.bias, Tensor::new(vec![width], b)?)?;
        self.classes.extend_from_slice(new_classes);
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(f, w, Some(b))
    }
}

fn check_disjoint(existing: &[ClassId], new: &[ClassId]) -> Result<()> {
    let mut seen: HashSet<ClassId> = existing.iter().copied().collect();
    for &c in new {
        if !seen.insert(c) {
            return Err(invalid!("class id {c} is already present in the head"));
        }
    }
    Ok(())
}

/// Parameter count of one adapter: two 1×1 convolutions plus their biases.
pub fn adapter_param_count(channels: usize, ratio: usize) -> usize {
    let hidden = channels / ratio;
    channels * hidden * 2 + hidden + channels
}
