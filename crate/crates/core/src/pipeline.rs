//! End-to-end denoising: plan references, match blocks, fit one model per
//! matched patch, fuse the decoded models, and aggregate the fused patch at
//! every member position.
//!
//! Groups are independent and may run on a rayon pool (feature `parallel`).
//! Each group derives its seed from `(seed, ref_x, ref_y)` and the results
//! are merged in reference order, so the output does not depend on the
//! worker count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::block_matching::{
    match_block_prepared, plan_references, threshold_image, BlockMatchConfig, PatchStack,
};
use crate::error::{invalid, Error, Result};
use crate::fitting::{fit_patch, FitConfig};
use crate::image::{extract_patch, Accumulator, ImageBuffer, Patch};
use crate::smoe::{decode, SampleGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Average,
    LossWeighted,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "loss-weighted" | "loss_weighted" => Ok(Self::LossWeighted),
            other => Err(invalid(format!(
                "unknown fusion mode {other:?} (expected average or loss-weighted)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::LossWeighted => "loss-weighted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub bm: BlockMatchConfig,
    pub fit: FitConfig,
    pub kernels: usize,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    /// Worker threads; 0 uses every available core, 1 runs serially.
    pub workers: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            bm: BlockMatchConfig::default(),
            fit: FitConfig::default(),
            kernels: 4,
            fusion_mode: FusionMode::Average,
            seed: 0,
            workers: 0,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        self.bm.validate()?;
        self.fit.validate()?;
        if !(1..=16).contains(&self.kernels) {
            return Err(invalid(format!(
                "kernels must be in 1..=16, got {}",
                self.kernels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenoiseStats {
    pub groups: usize,
    pub patches: usize,
    pub mean_loss: f64,
    pub encode_s: f64,
    pub decode_s: f64,
}

/// Seed for the group at `(x, y)`, a splitmix64 mix of the run seed and the
/// reference coordinates.
pub fn group_seed(seed: u64, x: usize, y: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ x as u64) ^ y as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutput {
    pub fused: Patch,
    /// Final loss of each member that was fitted successfully.
    pub losses: Vec<f64>,
    pub encode_s: f64,
    pub decode_s: f64,
}

/// Fits every member of `stack`, decodes all models on the shared grid and
/// fuses them. Members whose fit fails are dropped.
pub fn denoise_group(
    img: &ImageBuffer,
    stack: &PatchStack,
    cfg: &DenoiseConfig,
) -> Result<GroupOutput> {
    let seed = group_seed(cfg.seed, stack.reference.0, stack.reference.1);
    let t0 = Instant::now();
    let mut fits = Vec::with_capacity(stack.len());
    let mut last_err = None;
    for m in &stack.members {
        let patch = extract_patch(img, m.origin, stack.k)?;
        match fit_patch(&patch, cfg.kernels, &cfg.fit, seed) {
            Ok(r) => fits.push(r),
            Err(e) => last_err = Some(e),
        }
    }
    let encode_s = t0.elapsed().as_secs_f64();
    if fits.is_empty() {
        let source = last_err.unwrap_or_else(|| invalid("empty group"));
        return Err(Error::Group {
            x: stack.reference.0,
            y: stack.reference.1,
            source: Box::new(source),
        });
    }

    let t1 = Instant::now();
    let grid = SampleGrid::new(stack.k);
    let weights: Vec<f64> = match cfg.fusion_mode {
        FusionMode::Average => vec![1.0 / fits.len() as f64; fits.len()],
        FusionMode::LossWeighted => {
            let raw: Vec<f64> = fits.iter().map(|f| 1.0 / (f.loss + 1e-6)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|r| r / total).collect()
        }
    };
    let mut fused = vec![0.0; stack.k * stack.k];
    for (fit, alpha) in fits.iter().zip(&weights) {
        let decoded = decode(&fit.model, &grid);
        for (f, v) in fused.iter_mut().zip(decoded.values()) {
            *f += alpha * v;
        }
    }
    let fused = Patch::new(stack.k, stack.reference, fused)?;
    Ok(GroupOutput {
        fused,
        losses: fits.iter().map(|f| f.loss).collect(),
        encode_s,
        decode_s: t1.elapsed().as_secs_f64(),
    })
}

fn process_reference(
    noisy: &ImageBuffer,
    thresholded: &ImageBuffer,
    reference: (usize, usize),
    cfg: &DenoiseConfig,
) -> Result<(PatchStack, GroupOutput)> {
    let attach = |e: Error| match e {
        e @ Error::Group { .. } => e,
        other => Error::Group {
            x: reference.0,
            y: reference.1,
            source: Box::new(other),
        },
    };
    let stack = match_block_prepared(thresholded, reference, &cfg.bm).map_err(attach)?;
    let out = denoise_group(noisy, &stack, cfg).map_err(attach)?;
    Ok((stack, out))
}

#[cfg(feature = "parallel")]
fn run_groups(
    noisy: &ImageBuffer,
    thresholded: &ImageBuffer,
    refs: &[(usize, usize)],
    cfg: &DenoiseConfig,
) -> Result<Vec<(PatchStack, GroupOutput)>> {
    use rayon::prelude::*;

    if cfg.workers == 1 {
        return run_groups_serial(noisy, thresholded, refs, cfg);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        refs.par_iter()
            .map(|&r| process_reference(noisy, thresholded, r, cfg))
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn run_groups(
    noisy: &ImageBuffer,
    thresholded: &ImageBuffer,
    refs: &[(usize, usize)],
    cfg: &DenoiseConfig,
) -> Result<Vec<(PatchStack, GroupOutput)>> {
    run_groups_serial(noisy, thresholded, refs, cfg)
}

fn run_groups_serial(
    noisy: &ImageBuffer,
    thresholded: &ImageBuffer,
    refs: &[(usize, usize)],
    cfg: &DenoiseConfig,
) -> Result<Vec<(PatchStack, GroupOutput)>> {
    refs.iter()
        .map(|&r| process_reference(noisy, thresholded, r, cfg))
        .collect()
}

pub fn denoise_image(
    noisy: &ImageBuffer,
    cfg: &DenoiseConfig,
) -> Result<(ImageBuffer, DenoiseStats)> {
    cfg.validate()?;
    let refs = plan_references(noisy.width(), noisy.height(), &cfg.bm)?;
    let thresholded = threshold_image(noisy, &cfg.bm);
    let groups = run_groups(noisy, &thresholded, &refs, cfg)?;

    let t_agg = Instant::now();
    let mut acc = Accumulator::new(noisy.width(), noisy.height());
    let mut stats = DenoiseStats {
        groups: groups.len(),
        ..Default::default()
    };
    let mut loss_sum = 0.0;
    for (stack, out) in &groups {
        for m in &stack.members {
            acc.accumulate(&out.fused.clone().with_origin(m.origin), 1.0)?;
        }
        stats.patches += out.losses.len();
        loss_sum += out.losses.iter().sum::<f64>();
        stats.encode_s += out.encode_s;
        stats.decode_s += out.decode_s;
    }
    let denoised = acc.finalize(noisy)?;
    stats.decode_s += t_agg.elapsed().as_secs_f64();
    stats.mean_loss = if stats.patches > 0 {
        loss_sum / stats.patches as f64
    } else {
        0.0
    };
    Ok((denoised, stats))
}
