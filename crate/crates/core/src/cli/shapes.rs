//! Procedural training images: axis-aligned rectangles and isotropic blobs
//! over a dark background, values in [-1, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Label of an image: the kind of its first shape.
pub const RECT: usize = 0;
pub const BLOB: usize = 1;

pub struct Shapes {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Renders `count` images of `channels x resolution x resolution`. Image `i`
/// depends only on `(seed, i)`.
pub fn gen_shapes(seed: u64, count: usize, resolution: usize, palette: &[Vec<f64>]) -> Result<Shapes> {
    let channels = palette.first().map(Vec::len).unwrap_or(0);
    if count == 0 || resolution < 2 || channels == 0 || palette.iter().any(|c| c.len() != channels) {
        return Err(Error::invalid(
            "gen_shapes",
            "need count > 0, resolution >= 2 and a non-empty palette of equal-length colours",
        ));
    }
    let r = resolution;
    let plane = r * r;
    let mut data = vec![0f32; count * channels * plane];
    let mut labels = Vec::with_capacity(count);
    for (i, img) in data.chunks_mut(channels * plane).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let background: f64 = rng.random_range(-1.0..-0.6);
        let mut px = vec![background; channels * plane];
        let shapes = rng.random_range(1..=3);
        let mut first = RECT;
        for s in 0..shapes {
            let colour = &palette[rng.random_range(0..palette.len())];
            let kind = if rng.random_bool(0.5) { RECT } else { BLOB };
            if s == 0 {
                first = kind;
            }
            if kind == RECT {
                let w = rng.random_range(r / 4..=r * 3 / 4).max(1);
                let h = rng.random_range(r / 4..=r * 3 / 4).max(1);
                let x0 = rng.random_range(0..=r - w);
                let y0 = rng.random_range(0..=r - h);
                for (c, &col) in colour.iter().enumerate() {
                    for y in y0..y0 + h {
                        for x in x0..x0 + w {
                            px[c * plane + y * r + x] = col;
                        }
                    }
                }
            } else {
                let cx = rng.random_range(0.0..r as f64);
                let cy = rng.random_range(0.0..r as f64);
                let rad = rng.random_range(r as f64 / 8.0..r as f64 / 3.0);
                for y in 0..r {
                    for x in 0..r {
                        let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                        let a = (-d2 / (2.0 * rad * rad)).exp();
                        for (c, &col) in colour.iter().enumerate() {
                            let p = &mut px[c * plane + y * r + x];
                            *p = (1.0 - a) * *p + a * col;
                        }
                    }
                }
            }
        }
        for (o, v) in img.iter_mut().zip(px) {
            *o = v.clamp(-1.0, 1.0) as f32;
        }
        labels.push(first);
    }
    Ok(Shapes {
        images: Tensor::new(vec![count, channels, r, r], data)?,
        labels,
    })
}
