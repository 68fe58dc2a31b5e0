//! Image/mask samples: on-disk format, synthetic generation, batching and
//! dataset statistics.

pub mod batch;
pub mod pnm;
pub mod stats;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{generate_synthetic, SynthSpec};

/// One image `[3, H, W]` with values in `[0, 1]` and its row-major class map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Vec<u32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Vec<u32>) -> Result<Self> {
        let id = id.into();
        match *image.shape() {
            [3, h, w] if h * w == mask.len() => Ok(Sample { id, image, mask }),
            [3, h, w] => Err(Error::Data(format!("{id}: image is {h}x{w} but mask has {} pixels", mask.len()))),
            ref s => Err(Error::Data(format!("{id}: image must be [3,H,W], got {s:?}"))),
        }
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Every label is a class id below `num_classes` or `ignore_index`.
    pub fn validate_labels(&self, num_classes: usize, ignore_index: u32) -> Result<()> {
        let w = self.width();
        match self.mask.iter().position(|&v| v != ignore_index && v as usize >= num_classes) {
            None => Ok(()),
            Some(i) => Err(Error::Data(format!(
                "{}: mask value {} at row {} col {} is not a class id below {num_classes}",
                self.id,
                self.mask[i],
                i / w,
                i % w
            ))),
        }
    }
}

pub const IMAGE_SUFFIX: &str = ".img.ppm";
pub const MASK_SUFFIX: &str = ".mask.pgm";

/// Samples that loaded, plus those skipped with the reason.
#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    pub skipped: Vec<(String, Error)>,
}

/// Reads every `<id>.img.ppm` / `<id>.mask.pgm` pair in `dir`, in id order.
/// Samples with a missing mask, mismatched sizes or invalid labels are
/// skipped and reported; unreadable files abort the load.
pub fn load_dataset(dir: &Path, num_classes: usize, ignore_index: u32) -> Result<LoadedDataset> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().to_str()?.strip_suffix(IMAGE_SUFFIX).map(str::to_string))
        .collect();
    ids.sort();
    let mut out = LoadedDataset::default();
    for id in ids {
        let mask_path = dir.join(format!("{id}{MASK_SUFFIX}"));
        if !mask_path.exists() {
            out.skipped.push((id.clone(), Error::Data(format!("{id}: no mask file {}", mask_path.display()))));
            continue;
        }
        let image = pnm::read_ppm(&dir.join(format!("{id}{IMAGE_SUFFIX}")))?;
        let (mh, mw, mask) = pnm::read_pgm(&mask_path)?;
        let checked = Sample::new(id.clone(), image, mask).and_then(|s| {
            if (s.height(), s.width()) != (mh, mw) {
                return Err(Error::Data(format!(
                    "{id}: image is {}x{} but mask is {mh}x{mw}",
                    s.height(),
                    s.width()
                )));
            }
            s.validate_labels(num_classes, ignore_index)?;
            Ok(s)
        });
        match checked {
            Ok(s) => out.samples.push(s),
            Err(e) => {
                log::warn!("skipping sample: {e}");
                out.skipped.push((id, e));
            }
        }
    }
    Ok(out)
}

/// Writes each sample as a PPM/PGM pair; returns the written paths.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let img = dir.join(format!("{}{IMAGE_SUFFIX}", s.id));
        let mask = dir.join(format!("{}{MASK_SUFFIX}", s.id));
        pnm::write_ppm(&img, &s.image)?;
        pnm::write_pgm(&mask, s.height(), s.width(), &s.mask)?;
        written.extend([img, mask]);
    }
    Ok(written)
}
