//! Overlap and boundary-distance metrics for binary segmentation masks.

use crate::error::{shape_err, Error, Result};
use crate::network::argmax_classes;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(shape_err(
                "binary_mask",
                format!("{height}x{width} needs {} pixels, got {}", height * width, data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Mask as a `[1,H,W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.height, self.width],
            self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }
}

fn same_shape(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(shape_err(
            op,
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

fn overlap(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    same_shape(op, a, b)?;
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    Ok((inter, a.count(), b.count()))
}

/// `2|A∩B| / (|A|+|B|)`; 1.0 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, a, b) = overlap("dice", pred, gt)?;
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// `|A∩B| / |A∪B|`; 1.0 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, a, b) = overlap("iou", pred, gt)?;
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels with a 4-neighbour that is background or outside the
/// image, in row-major order.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize && mask.get(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let interior = inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1);
            if !interior {
                out.push((r, c));
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn squared_dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |i: usize| (i * i) as f64;
    for q in 1..n {
        let intersect = |p: usize| ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
        let mut s = intersect(v[k]);
        // z[0] = -inf stops the pop loop at k = 0.
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut d = vec![0.0; n];
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *out = diff * diff + f[v[k]];
    }
    d
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
fn squared_distance_map(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(r, c) in seeds {
        grid[r * w + c] = 0.0;
    }
    let mut col = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        for (r, v) in squared_dt_1d(&col).into_iter().enumerate() {
            grid[r * w + c] = v;
        }
    }
    for r in 0..h {
        let row = squared_dt_1d(&grid[r * w..(r + 1) * w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Percentile with linear interpolation between the closest ranks.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn directed_hd95(from: &[(usize, usize)], to_map: &[f64], width: usize) -> f64 {
    let mut d: Vec<f64> = from.iter().map(|&(r, c)| to_map[r * width + c].sqrt()).collect();
    d.sort_by(f64::total_cmp);
    percentile_linear(&d, 0.95)
}

/// Symmetric 95th-percentile boundary distance in pixels. Undefined (error)
/// when either mask is empty.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_shape("hd95", pred, gt)?;
    if pred.count() == 0 || gt.count() == 0 {
        return Err(Error::MetricUndefined(format!(
            "hd95 needs two nonempty masks (pred {}, gt {} pixels)",
            pred.count(),
            gt.count()
        )));
    }
    let (h, w) = (pred.height, pred.width);
    let bp = boundary(pred);
    let bg = boundary(gt);
    let to_gt = squared_distance_map(h, w, &bg);
    let to_pred = squared_distance_map(h, w, &bp);
    Ok(directed_hd95(&bp, &to_gt, w).max(directed_hd95(&bg, &to_pred, w)))
}

/// Foreground masks (argmax class ≠ 0) from `[B,K,H,W]` logits.
pub fn masks_from_logits(logits: &Tensor) -> Vec<BinaryMask> {
    let (h, w) = (logits.shape()[2], logits.shape()[3]);
    argmax_classes(logits)
        .into_iter()
        .map(|labels| BinaryMask {
            height: h,
            width: w,
            data: labels.into_iter().map(|c| c != 0).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn dice_and_iou_cases() {
        let a = mask(&["##..", "....", "...."]);
        let b = mask(&["##..", "##..", "...."]);
        assert!((dice(&a, &b).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = mask(&["....", "....", "..##"]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        let e = BinaryMask::empty(3, 4);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        assert!(dice(&a, &BinaryMask::empty(2, 2)).is_err());
    }

    #[test]
    fn boundary_cases() {
        let single = mask(&["...", ".#.", "..."]);
        assert_eq!(boundary(&single), vec![(1, 1)]);
        let square = mask(&[".....", ".###.", ".###.", ".###.", "....."]);
        let b = boundary(&square);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        let full = mask(&["###", "###"]);
        assert_eq!(boundary(&full).len(), 6);
        assert!(boundary(&BinaryMask::empty(3, 3)).is_empty());
    }

    #[test]
    fn hd95_cases() {
        let a = mask(&[".##.", ".##.", "...."]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        let p = BinaryMask::from_fn(5, 5, |r, c| (r, c) == (0, 0));
        let g = BinaryMask::from_fn(5, 5, |r, c| (r, c) == (3, 4));
        assert_eq!(hd95(&p, &g).unwrap(), 5.0);
        assert!(matches!(hd95(&p, &BinaryMask::empty(5, 5)), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let seeds = [(0, 3), (4, 0), (2, 2), (6, 6)];
        let map = squared_distance_map(7, 8, &seeds);
        for r in 0..7 {
            for c in 0..8 {
                let brute = seeds
                    .iter()
                    .map(|&(sr, sc)| (r as f64 - sr as f64).powi(2) + (c as f64 - sc as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(map[r * 8 + c], brute, "({r},{c})");
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile_linear(&[1.0], 0.95), 1.0);
        assert!((percentile_linear(&[0.0, 10.0], 0.95) - 9.5).abs() < 1e-12);
    }
}
