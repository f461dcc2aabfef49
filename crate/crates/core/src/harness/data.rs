//! Synthetic ellipse segmentation data and on-disk PGM datasets.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::pgm;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{seeded_rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center_row: f64,
    pub center_col: f64,
    pub radius_row: f64,
    pub radius_col: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    /// Whether the point `(row, col)` lies inside or on the ellipse.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (dr, dc) = (row - self.center_row, col - self.center_col);
        let (sin, cos) = self.angle.sin_cos();
        let u = (dc * cos + dr * sin) / self.radius_col;
        let v = (-dc * sin + dr * cos) / self.radius_row;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    /// `[1,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub id: String,
    /// Generating shapes (empty for samples loaded from disk).
    pub ellipses: Vec<Ellipse>,
}

impl SegmentationSample {
    pub fn new(image: Tensor, mask: BinaryMask, id: impl Into<String>) -> Result<Self> {
        if image.shape() != [1, mask.height(), mask.width()] {
            return Err(Error::Data(format!(
                "image {:?} does not match mask {}x{}",
                image.shape(),
                mask.height(),
                mask.width()
            )));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            image,
            mask,
            id: id.into(),
            ellipses: Vec::new(),
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

const MAX_FOREGROUND: f64 = 0.6;
const NOISE_SIGMA: f64 = 0.1;
const SUPERSAMPLE: usize = 4;

/// `n` noisy images of 1–3 bright anti-aliased ellipses with exact masks.
/// The same `(n, height, width, seed)` always yields the same data.
pub fn synth_dataset(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    if height < 8 || width < 8 {
        return Err(Error::Data(format!("synthetic images need at least 8x8, got {height}x{width}")));
    }
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let (h, w) = (height as f64, width as f64);
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let count = rng.random_range(1..=3);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| Ellipse {
                center_row: rng.random_range(0.2 * h..0.8 * h),
                center_col: rng.random_range(0.2 * w..0.8 * w),
                radius_row: rng.random_range(0.12 * h..0.3 * h),
                radius_col: rng.random_range(0.12 * w..0.3 * w),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let mask = BinaryMask::from_fn(height, width, |r, c| {
            ellipses.iter().any(|e| e.contains(r as f64, c as f64))
        });
        let fraction = mask.count() as f64 / (height * width) as f64;
        if mask.count() == 0 || fraction > MAX_FOREGROUND {
            continue;
        }
        let background = rng.random_range(0.05..0.25);
        let foreground = rng.random_range(0.75..0.95);
        let step = 1.0 / SUPERSAMPLE as f64;
        let offset = -0.5 + step / 2.0;
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let mut hits = 0;
                for sr in 0..SUPERSAMPLE {
                    for sc in 0..SUPERSAMPLE {
                        let (pr, pc) = (r as f64 + offset + sr as f64 * step, c as f64 + offset + sc as f64 * step);
                        if ellipses.iter().any(|e| e.contains(pr, pc)) {
                            hits += 1;
                        }
                    }
                }
                let coverage = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let clean = background + (foreground - background) * coverage;
                pixels.push((clean + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
        samples.push(SegmentationSample {
            image: Tensor::new(&[1, height, width], pixels)?,
            mask,
            id: format!("synth_{:04}", samples.len()),
            ellipses,
        });
    }
    Ok(samples)
}

/// Writes `images/<id>.pgm` and `masks/<id>.pgm` under `dir`.
pub fn save_dataset(samples: &[SegmentationSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        pgm::save_pgm(&s.image, &dir.join("images").join(format!("{}.pgm", s.id)))?;
        pgm::save_mask_pgm(&s.mask, &dir.join("masks").join(format!("{}.pgm", s.id)))?;
    }
    Ok(())
}

/// Reads every `images/*.pgm` with its same-named `masks/*.pgm`, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegmentationSample>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    let mut ids: Vec<String> = fs::read_dir(&images)
        .map_err(|e| Error::Data(format!("{}: {e}", images.display())))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension()? == "pgm").then(|| path.file_stem()?.to_str().map(str::to_owned))?
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("no .pgm images in {}", images.display())));
    }
    ids.into_iter()
        .map(|id| {
            let image = pgm::load_pgm(&images.join(format!("{id}.pgm")))?;
            let mask = pgm::load_mask_pgm(&masks.join(format!("{id}.pgm")))?;
            SegmentationSample::new(image, mask, id)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_within_contract() {
        let a = synth_dataset(8, 64, 64, 1).unwrap();
        let b = synth_dataset(8, 64, 64, 1).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let frac = s.mask.count() as f64 / (64.0 * 64.0);
            assert!(s.mask.count() > 0 && frac <= 0.6);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((1..=3).contains(&s.ellipses.len()));
        }
        assert_ne!(a, synth_dataset(8, 64, 64, 2).unwrap());
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(synth_dataset(1, 4, 4, 0).is_err());
    }
}
