//! Batch assembly: every sample is scaled to fit the crop (aspect kept),
//! then padded bottom/right with zeros (image) and `ignore_index` (mask).

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::{bilinear_weights, Tensor};

/// `(image [3, ch, cw], mask [ch·cw])` for one sample.
pub fn fit_to_crop(sample: &Sample, (ch, cw): (usize, usize), ignore_index: u32) -> Result<(Tensor, Vec<u32>)> {
    if ch == 0 || cw == 0 {
        return Err(Error::Config("train.crop must be positive".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    if (h, w) == (ch, cw) {
        return Ok((sample.image.clone(), sample.mask.clone()));
    }
    let scale = (ch as f64 / h as f64).min(cw as f64 / w as f64);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, ch);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, cw);
    let (ry, rx) = (bilinear_weights(h, nh), bilinear_weights(w, nw));
    let src = sample.image.data();
    let mut image = vec![0.0; 3 * ch * cw];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for (y, &(y0, y1, fy)) in ry.iter().enumerate() {
            for (x, &(x0, x1, fx)) in rx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                image[(c * ch + y) * cw + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    // Nearest neighbour on pixel centres keeps labels discrete.
    let nearest = |out: usize, size_in: usize, size_out: usize| {
        (((out as f64 + 0.5) * size_in as f64 / size_out as f64) as usize).min(size_in - 1)
    };
    let mut mask = vec![ignore_index; ch * cw];
    for y in 0..nh {
        let sy = nearest(y, h, nh);
        for x in 0..nw {
            mask[y * cw + x] = sample.mask[sy * w + nearest(x, w, nw)];
        }
    }
    Ok((Tensor::new([3, ch, cw], image)?, mask))
}

/// Stacks the samples at `indices` into `[B, 3, ch, cw]` plus labels.
pub fn make_batch(samples: &[Sample], indices: &[usize], crop: (usize, usize), ignore_index: u32) -> Result<(Tensor, Vec<u32>)> {
    if indices.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut images = Vec::with_capacity(indices.len() * 3 * crop.0 * crop.1);
    let mut masks = Vec::with_capacity(indices.len() * crop.0 * crop.1);
    for &i in indices {
        let (img, mask) = fit_to_crop(&samples[i], crop, ignore_index)?;
        images.extend_from_slice(img.data());
        masks.extend(mask);
    }
    Ok((Tensor::new([indices.len(), 3, crop.0, crop.1], images)?, masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Sample {
        let img = Tensor::from_fn([3, h, w], |i| (i % 7) as f64 / 7.0);
        let mask = (0..h * w).map(|i| ((i % w) * 3 / w) as u32).collect();
        Sample::new("s", img, mask).unwrap()
    }

    #[test]
    fn matching_size_is_unchanged() {
        let s = sample(8, 6);
        let (img, mask) = fit_to_crop(&s, (8, 6), 255).unwrap();
        assert_eq!(img, s.image);
        assert_eq!(mask, s.mask);
    }

    #[test]
    fn wide_image_is_letterboxed() {
        let s = sample(4, 16);
        let (img, mask) = fit_to_crop(&s, (8, 8), 255).unwrap();
        assert_eq!(img.shape(), &[3, 8, 8]);
        // Scale 0.5: content fills rows 0..2, the rest is padding.
        assert!(mask[..16].iter().all(|&m| m < 3));
        assert!(mask[16..].iter().all(|&m| m == 255));
        assert!(img.data()[2 * 8..8 * 8].iter().all(|&v| v == 0.0));
        assert_eq!(&mask[..8], &[0, 0, 0, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn constant_image_stays_constant_when_upscaled() {
        let s = Sample::new("c", Tensor::full([3, 3, 3], 0.4), vec![1; 9]).unwrap();
        let (img, mask) = fit_to_crop(&s, (7, 7), 255).unwrap();
        assert!(img.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn batch_stacks_in_order() {
        let samples = vec![sample(4, 4), Sample::new("z", Tensor::zeros([3, 4, 4]), vec![0; 16]).unwrap()];
        let (x, y) = make_batch(&samples, &[1, 0], (4, 4), 255).unwrap();
        assert_eq!(x.shape(), &[2, 3, 4, 4]);
        assert!(x.data()[..48].iter().all(|&v| v == 0.0));
        assert_eq!(&y[16..], &samples[0].mask[..]);
    }
}
