use rand::Rng;

use super::Image;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

/// Bilinear resize of one `h×w` plane to `oh×ow` using half-pixel centres:
/// output pixel `i` samples source coordinate `(i + 0.5)·h/oh − 0.5`, clamped
/// to the image, so a same-size resize is the identity.
pub fn resize_bilinear(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f32) {
        let x = ((i as f32 + 0.5) * src as f32 / dst as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(src - 1);
        (x0, x1, x - x0 as f32)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (y0, y1, fy) = coord(i, h, oh);
        for j in 0..ow {
            let (x0, x1, fx) = coord(j, w, ow);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Scales pixels to `[0, 1]` and resizes every channel to `size×size`.
/// Returns a `[C, size, size]` tensor.
pub fn preprocess(image: &Image, size: usize) -> Result<Tensor<f32>> {
    if image.channels == 0 || image.height == 0 || image.width == 0 || size == 0 {
        return Err(invalid!(
            "cannot preprocess a {}x{}x{} image to {size}x{size}",
            image.channels,
            image.height,
            image.width
        ));
    }
    let plane = image.height * image.width;
    let mut data = Vec::with_capacity(image.channels * size * size);
    for c in 0..image.channels {
        let scaled: Vec<f32> = image.pixels[c * plane..(c + 1) * plane]
            .iter()
            .map(|&p| p as f32 / 255.0)
            .collect();
        if image.height == size && image.width == size {
            data.extend(scaled);
        } else {
            data.extend(resize_bilinear(&scaled, image.height, image.width, size, size));
        }
    }
    Tensor::new(vec![image.channels, size, size], data)
}

/// Mirrors the last axis of a `[.., H, W]` tensor.
pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let w = *t.shape().last().expect("non-empty shape");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Training-time augmentation: horizontal flip with probability 0.5.
///
/// Consumes exactly one draw from `rng` per call.
pub fn augment(t: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    if rng.random_bool(0.5) {
        hflip(t)
    } else {
        t.clone()
    }
}

/// Sample already preprocessed to the network input size, with its mirror.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: u64,
    pub label: super::ClassId,
    pub pixels: Tensor<f32>,
    pub flipped: Tensor<f32>,
}

impl PreparedSample {
    pub fn new(sample: &super::Sample, size: usize) -> Result<Self> {
        let pixels = preprocess(&sample.image, size)?;
        let flipped = hflip(&pixels);
        Ok(Self {
            id: sample.id,
            label: sample.label,
            pixels,
            flipped,
        })
    }

    pub fn view(&self, flip: bool) -> &Tensor<f32> {
        if flip {
            &self.flipped
        } else {
            &self.pixels
        }
    }
}

/// Stacks `[C,H,W]` samples into `[N,C,H,W]`, mirroring those with `flips[i]` set.
pub fn batch_tensor(samples: &[&PreparedSample], flips: Option<&[bool]>) -> Result<Tensor<f32>> {
    let views: Vec<&Tensor<f32>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.view(flips.is_some_and(|f| f[i])))
        .collect();
    Tensor::stack(&views, false)
}
