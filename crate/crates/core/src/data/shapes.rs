//! Procedural stroke-figure corpus used to pretrain the backbone on classes
//! disjoint from every incremental task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassId, Corpus, Image, Sample, TEST_ID_OFFSET};
use crate::error::{invalid, Result};

/// First class id of the shapes corpus; keeps it clear of dataset labels.
pub const SHAPES_CLASS_BASE: ClassId = 1000;

type Segment = [(f64, f64); 2];

/// Stroke primitives in unit coordinates.
#[derive(Clone, Debug)]
enum Stroke {
    Polyline(Vec<(f64, f64)>),
    /// Centre, radii, start angle and sweep in radians.
    Arc { centre: (f64, f64), radii: (f64, f64), start: f64, sweep: f64 },
    Bezier([(f64, f64); 3]),
}

fn point(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85))
}

fn template(rng: &mut ChaCha8Rng) -> Vec<Stroke> {
    let strokes = rng.random_range(1..=3);
    (0..strokes)
        .map(|_| match rng.random_range(0..3) {
            0 => {
                let n = rng.random_range(1..=3);
                let mut pts: Vec<(f64, f64)> = (0..=n).map(|_| point(rng)).collect();
                if n > 1 && rng.random_bool(0.3) {
                    pts.push(pts[0]);
                }
                Stroke::Polyline(pts)
            }
            1 => Stroke::Arc {
                centre: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
                radii: (rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)),
                start: rng.random_range(0.0..std::f64::consts::TAU),
                sweep: rng.random_range(1.5..std::f64::consts::TAU),
            },
            _ => Stroke::Bezier([point(rng), point(rng), point(rng)]),
        })
        .collect()
}

/// Polyline approximation of a stroke, with each control point jittered.
fn flatten(stroke: &Stroke, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut j = |(x, y): (f64, f64)| (x + rng.random_range(-jitter..=jitter), y + rng.random_range(-jitter..=jitter));
    let pts: Vec<(f64, f64)> = match stroke {
        Stroke::Polyline(p) => p.iter().map(|&q| j(q)).collect(),
        Stroke::Arc { centre, radii, start, sweep } => {
            let (c, r) = (j(*centre), (radii.0 * (1.0 + jitter), radii.1 * (1.0 - jitter)));
            (0..=12)
                .map(|i| {
                    let a = start + sweep * i as f64 / 12.0;
                    (c.0 + r.0 * a.cos(), c.1 + r.1 * a.sin())
                })
                .collect()
        }
        Stroke::Bezier(ctrl) => {
            let [a, b, c] = ctrl.map(&mut j);
            (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    let (u, v, w) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
                    (u * a.0 + v * b.0 + w * c.0, u * a.1 + v * b.1 + w * c.1)
                })
                .collect()
        }
    };
    pts.windows(2).map(|w| [w[0], w[1]]).collect()
}

fn seg_distance(p: (f64, f64), [a, b]: Segment) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(strokes: &[Stroke], size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let segments: Vec<Segment> = strokes.iter().flat_map(|s| flatten(s, 0.04, rng)).collect();
    let scale = rng.random_range(0.8..1.1);
    let (ox, oy) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let angle: f64 = rng.random_range(-0.25..0.25);
    let (s, c) = angle.sin_cos();
    let width = rng.random_range(0.035..0.06);
    let warped: Vec<Segment> = segments
        .iter()
        .map(|seg| {
            seg.map(|(x, y)| {
                let (x, y) = ((x - 0.5) * scale, (y - 0.5) * scale);
                (c * x - s * y + 0.5 + ox, s * x + c * y + 0.5 + oy)
            })
        })
        .collect();
    let px = 1.0 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for col in 0..size {
            let p = ((col as f64 + 0.5) * px, (r as f64 + 0.5) * px);
            let d = warped.iter().map(|&sg| seg_distance(p, sg)).fold(f64::INFINITY, f64::min);
            // one-pixel linear falloff at the stroke edge
            let v = ((width - d) / px + 0.5).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// Builds `classes` stroke-figure classes with `per_class` train and
/// `per_class / 4` (at least one) test samples each, single channel.
pub fn generate_shapes(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Corpus> {
    if classes == 0 || per_class == 0 || size < 4 {
        return Err(invalid!(
            "shapes corpus needs classes, per_class > 0 and size >= 4 (got {classes}, {per_class}, {size})"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<Stroke>> = (0..classes).map(|_| template(&mut rng)).collect();
    let test_per_class = (per_class / 4).max(1);
    let mut corpus = Corpus::default();
    for (split, count, offset) in [(0, per_class, 0), (1, test_per_class, TEST_ID_OFFSET)] {
        let mut id = offset;
        for _ in 0..count {
            for (k, t) in templates.iter().enumerate() {
                let sample = Sample {
                    id,
                    label: SHAPES_CLASS_BASE + k as ClassId,
                    image: Image::new(1, size, size, render(t, size, &mut rng))?,
                };
                id += 1;
                if split == 0 {
                    corpus.train.push(sample);
                } else {
                    corpus.test.push(sample);
                }
            }
        }
    }
    Ok(corpus)
}
