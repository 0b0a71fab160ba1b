//! Hard-thresholded block matching.
//!
//! For every reference patch, all patch origins inside a square search
//! window are scored with the per-pixel quadratic distance
//! `‖γ(p) − γ(q)‖² / k²`, where `γ` zeroes values below `lambda_2d·sigma`.
//! Candidates under `tau_hard` are ranked by distance, ties broken in raster
//! order, and the closest `n_hard` form the group. The reference always
//! occupies slot 0.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{ImageBuffer, Patch};

/// Noise level (in `[0, 1]` units) above which the hard threshold kicks in.
pub const LAMBDA_2D_SIGMA_LIMIT: f64 = 40.0 / 255.0;

/// Threshold level applied by [`BlockMatchConfig::for_sigma`] above the limit.
pub const LAMBDA_2D_HIGH_NOISE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMatchConfig {
    pub k: usize,
    pub stride: usize,
    pub search_radius: usize,
    pub n_hard: usize,
    /// Per-pixel squared-intensity threshold in `[0, 1]` units.
    pub tau_hard: f64,
    pub sigma: f64,
    pub lambda_2d: f64,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self {
            k: 8,
            stride: 4,
            search_radius: 19,
            n_hard: 16,
            tau_hard: 2500.0 / (255.0 * 255.0),
            sigma: 0.0,
            lambda_2d: 0.0,
        }
    }
}

impl BlockMatchConfig {
    /// Defaults with `sigma` set and `lambda_2d` chosen from it.
    pub fn for_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            lambda_2d: if sigma <= LAMBDA_2D_SIGMA_LIMIT {
                0.0
            } else {
                LAMBDA_2D_HIGH_NOISE
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid(format!(
                "patch size k must be >= 2, got {}",
                self.k
            )));
        }
        if self.stride < 1 {
            return Err(invalid("stride must be >= 1"));
        }
        if self.n_hard < 1 {
            return Err(invalid("n_hard must be >= 1"));
        }
        if !(self.tau_hard > 0.0) {
            return Err(invalid(format!(
                "tau_hard must be > 0, got {}",
                self.tau_hard
            )));
        }
        if !(self.sigma >= 0.0) || !(self.lambda_2d >= 0.0) {
            return Err(invalid("sigma and lambda_2d must be >= 0"));
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        self.lambda_2d * self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    pub origin: (usize, usize),
    pub distance: f64,
}

/// A matched group of patches sorted by distance to the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStack {
    pub reference: (usize, usize),
    pub members: Vec<Member>,
    pub k: usize,
}

impl PatchStack {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[inline]
fn gamma(v: f64, threshold: f64) -> f64 {
    if v.abs() < threshold {
        0.0
    } else {
        v
    }
}

pub fn hard_threshold(patch: &Patch, lambda_2d: f64, sigma: f64) -> Patch {
    let t = lambda_2d * sigma;
    let mut out = patch.clone();
    if t > 0.0 {
        for v in out.values_mut() {
            *v = gamma(*v, t);
        }
    }
    out
}

pub fn patch_distance(p: &Patch, q: &Patch, cfg: &BlockMatchConfig) -> Result<f64> {
    if p.k() != q.k() {
        return Err(invalid(format!(
            "patch sizes differ: {} vs {}",
            p.k(),
            q.k()
        )));
    }
    let t = cfg.threshold();
    let k = p.k();
    let sum: f64 = p
        .values()
        .iter()
        .zip(q.values())
        .map(|(&a, &b)| {
            let d = gamma(a, t) - gamma(b, t);
            d * d
        })
        .sum();
    Ok(sum / (k * k) as f64)
}

fn axis_positions(len: usize, k: usize, stride: usize) -> Vec<usize> {
    let last = len - k;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Reference origins in row-major order; the last row/column is forced to
/// the image border.
pub fn plan_references(
    width: usize,
    height: usize,
    cfg: &BlockMatchConfig,
) -> Result<Vec<(usize, usize)>> {
    if width < cfg.k || height < cfg.k {
        return Err(invalid(format!(
            "image {width}x{height} is smaller than patch size {}",
            cfg.k
        )));
    }
    if cfg.stride == 0 {
        return Err(invalid("stride must be >= 1"));
    }
    let xs = axis_positions(width, cfg.k, cfg.stride);
    let ys = axis_positions(height, cfg.k, cfg.stride);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect())
}

/// Image with `γ` applied pixel-wise. Since `γ` is pointwise, thresholding
/// the whole image once is the same as thresholding every patch.
pub fn threshold_image(img: &ImageBuffer, cfg: &BlockMatchConfig) -> ImageBuffer {
    let t = cfg.threshold();
    if t <= 0.0 {
        return img.clone();
    }
    let data = img.data().iter().map(|&v| gamma(v, t)).collect();
    ImageBuffer::new(img.width(), img.height(), data).expect("dimensions preserved")
}

/// Matches against an image that has already been passed through
/// [`threshold_image`]. Used by the pipeline to threshold once per image.
pub fn match_block_prepared(
    thresholded: &ImageBuffer,
    reference: (usize, usize),
    cfg: &BlockMatchConfig,
) -> Result<PatchStack> {
    let (w, h, k) = (thresholded.width(), thresholded.height(), cfg.k);
    let (rx, ry) = reference;
    if k == 0 || rx + k > w || ry + k > h {
        return Err(crate::Error::OutOfBounds {
            x: rx,
            y: ry,
            k,
            width: w,
            height: h,
        });
    }
    let data = thresholded.data();
    let norm = (k * k) as f64;
    let r = cfg.search_radius;
    let x_lo = rx.saturating_sub(r);
    let x_hi = (rx + r).min(w - k);
    let y_lo = ry.saturating_sub(r);
    let y_hi = (ry + r).min(h - k);

    let mut candidates = Vec::with_capacity((x_hi - x_lo + 1) * (y_hi - y_lo + 1));
    for cy in y_lo..=y_hi {
        for cx in x_lo..=x_hi {
            if (cx, cy) == reference {
                continue;
            }
            let mut sum = 0.0;
            'rows: for j in 0..k {
                let a = &data[(ry + j) * w + rx..(ry + j) * w + rx + k];
                let b = &data[(cy + j) * w + cx..(cy + j) * w + cx + k];
                for (p, q) in a.iter().zip(b) {
                    let d = p - q;
                    sum += d * d;
                }
                // partial sums only grow; stop once the threshold is exceeded
                if sum / norm > cfg.tau_hard {
                    break 'rows;
                }
            }
            let distance = sum / norm;
            if distance <= cfg.tau_hard {
                candidates.push(Member {
                    origin: (cx, cy),
                    distance,
                });
            }
        }
    }
    // candidates are generated in raster order, so a stable sort on distance
    // yields the (distance, y, x) order
    candidates.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    candidates.truncate(cfg.n_hard - 1);

    let mut members = Vec::with_capacity(candidates.len() + 1);
    members.push(Member {
        origin: reference,
        distance: 0.0,
    });
    members.extend(candidates);
    Ok(PatchStack {
        reference,
        members,
        k,
    })
}

pub fn match_block(
    img: &ImageBuffer,
    reference: (usize, usize),
    cfg: &BlockMatchConfig,
) -> Result<PatchStack> {
    cfg.validate()?;
    let prepared = threshold_image(img, cfg);
    match_block_prepared(&prepared, reference, cfg)
}

/// CSV rows `ref_x,ref_y,member_x,member_y,distance` (no header).
pub fn stack_csv_rows(stack: &PatchStack) -> Vec<String> {
    stack
        .members
        .iter()
        .map(|m| {
            format!(
                "{},{},{},{},{}",
                stack.reference.0, stack.reference.1, m.origin.0, m.origin.1, m.distance
            )
        })
        .collect()
}
