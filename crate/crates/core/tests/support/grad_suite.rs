//! Finite-difference checks of every differentiable building block, in f64.

use dynammo::model::{
    block_forward_with_adapter, features, AdapterSet, Backbone, BackboneSpec, TaskHead, UnifiedHead,
};
use dynammo::numerics::{grad_check, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn param(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
    let t = rand_tensor(rng, shape);
    store.add(name, t).unwrap()
}

/// `sum(y ⊙ r)` with a fixed random `r`, so every output entry carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> dynammo::Result<Var> {
    let r = g.input(r.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Randomises every parameter (including zero-initialised adapter up
/// projections and heads) so no gradient is trivially zero.
fn randomise(store: &mut ParamStore<f64>, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        let t = Tensor::from_fn(&shape, |_| scale * rng.random_range(-1.0..1.0));
        store.set_value(id, t).unwrap();
    }
}

fn small_spec() -> BackboneSpec {
    BackboneSpec {
        in_channels: 2,
        image_size: 8,
        channels: vec![4, 8],
        kernel: 3,
    }
}

pub fn conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (stride, padding) = [(1, 1), (2, 0), (2, 1)][seed as usize % 3];
    let x = param(&mut s, &mut rng, "x", &[2, 3, 5, 5]);
    let w = param(&mut s, &mut rng, "w", &[4, 3, 3, 3]);
    let b = param(&mut s, &mut rng, "b", &[4]);
    let mut g0 = Graph::new();
    let (xv, wv) = (g0.param(&s, x), g0.param(&s, w));
    let y0 = g0.conv2d(xv, wv, None, stride, padding).unwrap();
    let shape = g0.value(y0).shape().to_vec();
    let r = rand_tensor(&mut rng, &shape);
    grad_check(&mut s, &[x, w, b], STEP, |g, s| {
        let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.conv2d(xv, wv, Some(bv), stride, padding)?;
        weighted_sum(g, y, &r)
    })
    .unwrap()
}

pub fn linear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = param(&mut s, &mut rng, "x", &[3, 5]);
    let w = param(&mut s, &mut rng, "w", &[4, 5]);
    let b = param(&mut s, &mut rng, "b", &[4]);
    let r = rand_tensor(&mut rng, &[3, 4]);
    grad_check(&mut s, &[x, w, b], STEP, |g, s| {
        let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.linear(xv, wv, Some(bv))?;
        weighted_sum(g, y, &r)
    })
    .unwrap()
}

pub fn relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = param(&mut s, &mut rng, "x", &[2, 3, 4, 4]);
    let r = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    grad_check(&mut s, &[x], STEP, |g, s| {
        let xv = g.param(s, x);
        let y = g.relu(xv);
        weighted_sum(g, y, &r)
    })
    .unwrap()
}

/// Max pooling followed by global average pooling.
pub fn pooling(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = param(&mut s, &mut rng, "x", &[2, 3, 6, 6]);
    let r = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let r2 = rand_tensor(&mut rng, &[2, 3]);
    grad_check(&mut s, &[x], STEP, |g, s| {
        let xv = g.param(s, x);
        let p = g.max_pool2d(xv, 2)?;
        let a = weighted_sum(g, p, &r)?;
        let q = g.global_avg_pool(p)?;
        let b = weighted_sum(g, q, &r2)?;
        g.add(a, b)
    })
    .unwrap()
}

/// `h + up(relu(down(h)))` on top of one backbone block; input, block and adapter all checked.
pub fn adapter_block(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let backbone = Backbone::new(&mut s, small_spec(), &mut rng).unwrap();
    let set = AdapterSet::new(&mut s, "a", 1, &backbone, 2, &mut rng).unwrap();
    randomise(&mut s, &set.params(), &mut rng, 0.5);
    let x = param(&mut s, &mut rng, "x", &[2, 2, 8, 8]);
    let r = rand_tensor(&mut rng, &[2, 4, 4, 4]);
    let mut ids = vec![x];
    ids.extend([backbone.blocks()[0].weight, backbone.blocks()[0].bias]);
    ids.extend(set.adapters[0].params());
    grad_check(&mut s, &ids, STEP, |g, s| {
        let xv = g.param(s, x);
        let y = block_forward_with_adapter(g, s, &backbone, &set.adapters[0], xv)?;
        weighted_sum(g, y, &r)
    })
    .unwrap()
}

pub fn task_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let head = TaskHead::new(&mut s, "h", 2, 6, &[4, 7]).unwrap();
    randomise(&mut s, &head.params(), &mut rng, 1.0);
    let f = param(&mut s, &mut rng, "f", &[5, 6]);
    // two current-task labels and the "other" slot
    let labels = [0, 1, 2, 2, 0];
    let mut ids = vec![f];
    ids.extend(head.params());
    grad_check(&mut s, &ids, STEP, |g, s| {
        let fv = g.param(s, f);
        let y = head.forward(g, s, fv)?;
        g.cross_entropy(y, &labels)
    })
    .unwrap()
}

pub fn unified_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let mut head = UnifiedHead::new(&mut s, "u", 6, &[3, 1]).unwrap();
    randomise(&mut s, &head.params(), &mut rng, 1.0);
    head.expand(&mut s, &[8, 5]).unwrap();
    let f = param(&mut s, &mut rng, "f", &[6, 6]);
    let labels: Vec<usize> = (0..6).map(|i| i % 4).collect();
    let mut ids = vec![f];
    ids.extend(head.params());
    grad_check(&mut s, &ids, STEP, |g, s| {
        let fv = g.param(s, f);
        let y = head.forward(g, s, fv)?;
        g.cross_entropy(y, &labels)
    })
    .unwrap()
}

/// Adapter-tuning objective: frozen backbone, trainable adapters in every
/// block and a task head whose last output takes replayed samples.
pub fn adapter_tuning_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let backbone = Backbone::new(&mut s, small_spec(), &mut rng).unwrap();
    backbone.freeze(&mut s);
    let set = AdapterSet::new(&mut s, "a", 3, &backbone, 2, &mut rng).unwrap();
    randomise(&mut s, &set.params(), &mut rng, 0.5);
    let head = TaskHead::new(&mut s, "h", 3, 8, &[5, 6]).unwrap();
    randomise(&mut s, &head.params(), &mut rng, 1.0);
    let x = rand_tensor(&mut rng, &[4, 2, 8, 8]);
    let labels = [0, 1, 2, 2];
    let mut ids = set.params();
    ids.extend(head.params());
    grad_check(&mut s, &ids, STEP, |g, s| {
        let xv = g.input(x.clone());
        let f = features(g, s, &backbone, Some(&set), xv)?;
        let y = head.forward(g, s, f)?;
        g.cross_entropy(y, &labels)
    })
    .unwrap()
}

pub type Case = (&'static str, fn(u64) -> f64);

pub const CASES: [Case; 8] = [
    ("conv", conv),
    ("linear", linear),
    ("relu", relu),
    ("pooling", pooling),
    ("adapter residual block", adapter_block),
    ("task head", task_head),
    ("unified head", unified_head),
    ("adapter-tuning loss", adapter_tuning_loss),
];
