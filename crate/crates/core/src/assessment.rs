//! Speckle simulation and full-reference quality metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{invalid, Result};
use crate::fitting::{SSIM_C1, SSIM_C2};
use crate::image::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the multiplicative factor `ε`.
    pub sigma: f64,
    pub seed: u64,
    pub distribution: NoiseDistribution,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.2,
            seed: 0,
            distribution: NoiseDistribution::Gaussian,
        }
    }
}

/// `x̃ = clamp(x·(1+ε), 0, 1)` with i.i.d. `ε ~ N(0, σ²)`.
pub fn add_speckle(img: &ImageBuffer, cfg: &NoiseConfig) -> Result<ImageBuffer> {
    if !(cfg.sigma >= 0.0) || !cfg.sigma.is_finite() {
        return Err(invalid(format!(
            "speckle sigma must be finite and >= 0, got {}",
            cfg.sigma
        )));
    }
    if cfg.sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = match cfg.distribution {
        NoiseDistribution::Gaussian => {
            let eps = Normal::new(0.0, cfg.sigma).map_err(|e| invalid(e.to_string()))?;
            img.data()
                .iter()
                .map(|&x| (x * (1.0 + eps.sample(&mut rng))).clamp(0.0, 1.0))
                .collect()
        }
    };
    ImageBuffer::new(img.width(), img.height(), data)
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_dims(b) {
        return Err(invalid(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// PSNR in dB with peak 1.0. Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable 'valid' filtering of a `w`×`h` field.
fn filter_valid(data: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = src[x..x + n].iter().zip(taps).map(|(v, t)| v * t).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| rows[(y + j) * ow + x] * t)
                .sum();
        }
    }
    out
}

/// Mean local SSIM over every 11×11 Gaussian window (σ = 1.5) that fits.
pub fn ssim_image(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid(format!(
            "ssim_image needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}; use ssim_block for small patches"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (da, db) = (a.data(), b.data());
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = da.iter().zip(db).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(da, w, h, &taps);
    let mu_b = filter_valid(db, w, h, &taps);
    let e_aa = filter_valid(&sq(da), w, h, &taps);
    let e_bb = filter_valid(&sq(db), w, h, &taps);
    let e_ab = filter_valid(&prod, w, h, &taps);

    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

pub const GMSD_C: f64 = 0.0026;

/// Prewitt gradient magnitude over the interior pixels.
fn prewitt_magnitude(img: &ImageBuffer) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: isize, dy: isize| {
                img.get((x as isize + dx) as usize, (y as isize + dy) as usize)
            };
            let gx = (p(1, -1) + p(1, 0) + p(1, 1) - p(-1, -1) - p(-1, 0) - p(-1, 1)) / 3.0;
            let gy = (p(-1, 1) + p(0, 1) + p(1, 1) - p(-1, -1) - p(0, -1) - p(1, -1)) / 3.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Gradient magnitude similarity deviation. Lower is better; 0 for
/// identical images.
pub fn gmsd(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    if a.width() < 3 || a.height() < 3 {
        return Err(invalid("gmsd needs at least 3x3 pixels"));
    }
    let ma = prewitt_magnitude(a);
    let mb = prewitt_magnitude(b);
    let sim: Vec<f64> = ma
        .iter()
        .zip(&mb)
        .map(|(x, y)| (2.0 * x * y + GMSD_C) / (x * x + y * y + GMSD_C))
        .collect();
    let n = sim.len() as f64;
    let mean = sim.iter().sum::<f64>() / n;
    let var = sim.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub gmsd: f64,
}

impl QualityReport {
    pub fn compare(reference: &ImageBuffer, test: &ImageBuffer) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, test)?,
            ssim: ssim_image(reference, test)?,
            gmsd: gmsd(reference, test)?,
        })
    }
}

/// Serializes a dB value, writing `+∞` as the string `"inf"`.
pub fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

impl Serialize for QualityReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        struct Db(f64);
        impl Serialize for Db {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                serialize_db(&self.0, s)
            }
        }
        let mut st = s.serialize_struct("QualityReport", 3)?;
        st.serialize_field("psnr", &Db(self.psnr))?;
        st.serialize_field("ssim", &self.ssim)?;
        st.serialize_field("gmsd", &self.gmsd)?;
        st.end()
    }
}
