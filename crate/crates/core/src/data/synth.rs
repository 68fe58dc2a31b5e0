//! Procedural segmentation task: class-coloured rectangles and ellipses on
//! a class-0 background, plus Gaussian pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_images: 16,
            height: 32,
            width: 32,
            num_classes: 3,
            noise_std: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("synthetic masks hold at most 255 classes".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!("synthetic images must be at least 4x4, got {}x{}", self.height, self.width)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// RGB colour of `class`: background is dark grey, foreground classes walk
/// the hue circle by the golden ratio at full saturation.
pub fn class_color(class: usize) -> [f64; 3] {
    if class == 0 {
        return [0.2, 0.2, 0.2];
    }
    let hue = (class as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

/// At most three shapes, each at most half of either side, so some
/// background always survives.
const MAX_SHAPES: usize = 3;

pub fn generate_synthetic<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<Sample>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let mut mask = vec![0u32; h * w];
        for _ in 0..rng.random_range(1..=MAX_SHAPES) {
            let class = rng.random_range(1..spec.num_classes) as u32;
            let sh = rng.random_range(2.max(h / 6)..=h / 2);
            let sw = rng.random_range(2.max(w / 6)..=w / 2);
            let y0 = rng.random_range(0..=h - sh);
            let x0 = rng.random_range(0..=w - sw);
            let ellipse = rng.random_bool(0.5);
            let (cy, cx) = (y0 as f64 + sh as f64 / 2.0, x0 as f64 + sw as f64 / 2.0);
            let (ry, rx) = (sh as f64 / 2.0, sw as f64 / 2.0);
            for y in y0..y0 + sh {
                for x in x0..x0 + sw {
                    let inside = !ellipse || {
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        dy * dy + dx * dx <= 1.0
                    };
                    if inside {
                        mask[y * w + x] = class;
                    }
                }
            }
        }
        let n = h * w;
        let mut data = vec![0.0; 3 * n];
        for c in 0..3 {
            for p in 0..n {
                let base = class_color(mask[p] as usize)[c];
                let jitter = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data[c * n + p] = (base + jitter).clamp(0.0, 1.0);
            }
        }
        let image = Tensor::new([3, h, w], data)?;
        out.push(Sample::new(format!("synth_{i:05}"), image, mask)?);
    }
    Ok(out)
}
