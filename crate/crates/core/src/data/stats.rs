//! Image-area statistics of a dataset: resolution range ratio and the
//! Gini coefficient of areas.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::{pnm, MASK_SUFFIX};
use crate::error::{Error, Result};

fn check(areas: &[f64]) -> Result<()> {
    if areas.is_empty() {
        return Err(Error::Data("no image areas to summarise".into()));
    }
    if let Some(a) = areas.iter().find(|&&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::Data(format!("image areas must be positive, got {a}")));
    }
    Ok(())
}

/// `A_max / A_min`.
pub fn resolution_range_ratio(areas: &[f64]) -> Result<f64> {
    check(areas)?;
    let max = areas.iter().copied().fold(f64::MIN, f64::max);
    let min = areas.iter().copied().fold(f64::MAX, f64::min);
    Ok(max / min)
}

/// `Σ_i Σ_j |A_i − A_j| / (2 n² Ā)`, evaluated on sorted areas as
/// `2 Σ_k (2k − n + 1) A_(k)` for the double sum.
pub fn gini_coefficient(areas: &[f64]) -> Result<f64> {
    check(areas)?;
    let mut sorted = areas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, &a)| (2.0 * k as f64 - n + 1.0) * a)
        .sum();
    Ok((2.0 * weighted / (2.0 * n * n * mean)).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub n: usize,
    pub areas: Vec<f64>,
    pub r_range: f64,
    pub gini: f64,
    pub mean_area: f64,
}

impl DatasetStats {
    pub fn from_areas(areas: Vec<f64>) -> Result<Self> {
        let r_range = resolution_range_ratio(&areas)?;
        let gini = gini_coefficient(&areas)?;
        let mean_area = areas.iter().sum::<f64>() / areas.len() as f64;
        Ok(DatasetStats {
            n: areas.len(),
            areas,
            r_range,
            gini,
            mean_area,
        })
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} r_range={:?} gini={:?} mean_area={:?}",
            self.n, self.r_range, self.gini, self.mean_area
        )
    }
}

/// Directory names that hold label maps rather than images.
const ANNOTATION_DIRS: &[&str] = &["ann_dir", "annotations", "masks", "mask", "labels"];

/// Collects image files under `root`: `*.img.ppm` from this crate's format
/// and `png`/`jpg`/`jpeg` from other layouts, skipping annotation folders.
/// Sorted for stable output.
pub fn find_images(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
            if path.is_dir() {
                if !ANNOTATION_DIRS.contains(&name.as_str()) {
                    stack.push(path);
                }
            } else if name.ends_with(super::IMAGE_SUFFIX)
                || (!name.ends_with(MASK_SUFFIX)
                    && [".png", ".jpg", ".jpeg"].iter().any(|ext| name.ends_with(ext)))
            {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Pixel area of every image under `root`.
pub fn scan_areas(root: &Path) -> Result<Vec<f64>> {
    find_images(root)?
        .iter()
        .map(|p| {
            let (w, h) = if p.extension().is_some_and(|e| e == "ppm") {
                pnm::dimensions(p)?
            } else {
                let (w, h) = image::image_dimensions(p)
                    .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                (w as usize, h as usize)
            };
            Ok((w * h) as f64)
        })
        .collect()
}
