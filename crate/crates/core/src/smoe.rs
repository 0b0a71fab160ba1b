//! Steered mixture-of-experts regression model.
//!
//! Each expert is a 2D Gaussian kernel whose inverse covariance is stored
//! through a lower-triangular factor `L = [[e^a, 0], [b, e^c]]`, so that
//! `Σ⁻¹ = L·Lᵀ` is symmetric positive definite for any raw `(a, b, c)`.
//! Gates are the prior-weighted kernel responses normalized to a partition
//! of unity, and the output is the gate-weighted sum of constant experts.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::image::Patch;

/// Raw parameters per kernel, in the order used by [`SmoeModel::to_params`].
pub const PARAMS_PER_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel2D {
    pub mu_x: f64,
    pub mu_y: f64,
    /// Log of the first diagonal entry of the Cholesky factor.
    pub a: f64,
    /// Off-diagonal entry of the Cholesky factor.
    pub b: f64,
    /// Log of the second diagonal entry of the Cholesky factor.
    pub c: f64,
    /// Constant expert output.
    pub w: f64,
    pub prior_logit: f64,
}

impl Kernel2D {
    /// Inverse covariance `[[p00, p01], [p01, p11]]`.
    pub fn precision(&self) -> [[f64; 2]; 2] {
        let ea = self.a.exp();
        let ec = self.c.exp();
        let off = ea * self.b;
        [[ea * ea, off], [off, self.b * self.b + ec * ec]]
    }

    /// Squared Mahalanobis distance `(x−μ)ᵀ Σ⁻¹ (x−μ)`, computed as `‖Lᵀ(x−μ)‖²`.
    #[inline]
    pub fn mahalanobis(&self, x: (f64, f64)) -> f64 {
        let dx = x.0 - self.mu_x;
        let dy = x.1 - self.mu_y;
        let u1 = self.a.exp() * dx + self.b * dy;
        let u2 = self.c.exp() * dy;
        u1 * u1 + u2 * u2
    }
}

pub fn kernel_eval(kernel: &Kernel2D, x: (f64, f64)) -> f64 {
    (-0.5 * kernel.mahalanobis(x)).exp()
}

/// Pixel-center sample positions of a `k`×`k` patch in `[0, 1]²`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    k: usize,
    positions: Vec<(f64, f64)>,
}

impl SampleGrid {
    pub fn new(k: usize) -> Self {
        let kf = k as f64;
        let positions = (0..k)
            .flat_map(|j| (0..k).map(move |i| ((i as f64 + 0.5) / kf, (j as f64 + 0.5) / kf)))
            .collect();
        Self { k, positions }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoeModel {
    pub kernels: Vec<Kernel2D>,
    pub k: usize,
}

impl SmoeModel {
    pub fn new(kernels: Vec<Kernel2D>, k: usize) -> Result<Self> {
        if kernels.is_empty() {
            return Err(invalid("a model needs at least one kernel"));
        }
        Ok(Self { kernels, k })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Mixing priors, a softmax over the prior logits.
    pub fn priors(&self) -> Vec<f64> {
        let logits: Vec<f64> = self.kernels.iter().map(|k| k.prior_logit).collect();
        softmax(&logits)
    }

    /// Flattened raw parameters `(mu_x, mu_y, a, b, c, w, prior_logit)` per kernel.
    pub fn to_params(&self) -> Vec<f64> {
        self.kernels
            .iter()
            .flat_map(|k| [k.mu_x, k.mu_y, k.a, k.b, k.c, k.w, k.prior_logit])
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.kernels.len() * PARAMS_PER_KERNEL);
        for (kernel, p) in self
            .kernels
            .iter_mut()
            .zip(params.chunks_exact(PARAMS_PER_KERNEL))
        {
            *kernel = Kernel2D {
                mu_x: p[0],
                mu_y: p[1],
                a: p[2],
                b: p[3],
                c: p[4],
                w: p[5],
                prior_logit: p[6],
            };
        }
    }

    /// One kernel per line: `mu_x mu_y a b c w prior_logit`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in &self.kernels {
            // `{:?}` prints the shortest representation that round-trips
            writeln!(
                out,
                "{:?} {:?} {:?} {:?} {:?} {:?} {:?}",
                k.mu_x, k.mu_y, k.a, k.b, k.c, k.w, k.prior_logit
            )
            .unwrap();
        }
        out
    }

    /// Parses [`SmoeModel::to_text`] output. Blank lines and `#` comments are skipped.
    pub fn from_text(text: &str, k: usize) -> Result<Self> {
        let mut kernels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| invalid(format!("model line {}: {e}", lineno + 1)))?;
            if vals.len() != PARAMS_PER_KERNEL {
                return Err(invalid(format!(
                    "model line {}: expected {PARAMS_PER_KERNEL} values, got {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            kernels.push(Kernel2D {
                mu_x: vals[0],
                mu_y: vals[1],
                a: vals[2],
                b: vals[3],
                c: vals[4],
                w: vals[5],
                prior_logit: vals[6],
            });
        }
        Self::new(kernels, k)
    }
}

/// Numerically stable softmax. Never produces an all-zero vector.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    out
}

#[inline]
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Gate values `gᵢ = πᵢkᵢ / Σⱼ πⱼkⱼ`.
///
/// Evaluated in the log domain as a softmax over `logitᵢ − ½·dᵢ`; the prior
/// normalizer cancels. When every `πᵢkᵢ` would underflow, the kernel with the
/// largest `log πᵢ + log kᵢ` still receives (close to) all the mass.
pub fn gates_eval(model: &SmoeModel, x: (f64, f64)) -> Vec<f64> {
    let mut g: Vec<f64> = model
        .kernels
        .iter()
        .map(|k| k.prior_logit - 0.5 * k.mahalanobis(x))
        .collect();
    softmax_in_place(&mut g);
    g
}

/// Regression output `y(x) = Σ wᵢ gᵢ(x)` at every grid point. Not clamped.
pub fn decode(model: &SmoeModel, grid: &SampleGrid) -> Patch {
    let mut scratch = vec![0.0; model.len()];
    let values = grid
        .positions()
        .iter()
        .map(|&x| {
            for (s, k) in scratch.iter_mut().zip(&model.kernels) {
                *s = k.prior_logit - 0.5 * k.mahalanobis(x);
            }
            softmax_in_place(&mut scratch);
            scratch
                .iter()
                .zip(&model.kernels)
                .map(|(g, k)| g * k.w)
                .sum()
        })
        .collect();
    Patch::new(grid.k(), (0, 0), values).expect("grid has k*k positions")
}

/// Grid shape `(cols, rows)` used to lay out `count` centers.
fn center_layout(count: usize) -> (usize, usize) {
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    (cols, rows)
}

/// Initial model: centers on a near-square grid, isotropic bandwidth of
/// about one grid cell, expert levels read from the nearest pixel and
/// uniform priors.
pub fn init_model(patch: &Patch, count: usize) -> Result<SmoeModel> {
    if count < 1 {
        return Err(invalid("kernel count must be >= 1"));
    }
    let k = patch.k();
    let (cols, rows) = center_layout(count);
    let log_scale = (2.0 * (count as f64).sqrt()).ln();
    let nearest = |t: f64| ((t * k as f64).floor() as usize).min(k - 1);
    let kernels = (0..count)
        .map(|idx| {
            let (col, row) = (idx % cols, idx / cols);
            let mu_x = (col as f64 + 0.5) / cols as f64;
            let mu_y = (row as f64 + 0.5) / rows as f64;
            Kernel2D {
                mu_x,
                mu_y,
                a: log_scale,
                b: 0.0,
                c: log_scale,
                w: patch.at(nearest(mu_x), nearest(mu_y)),
                prior_logit: 0.0,
            }
        })
        .collect();
    SmoeModel::new(kernels, k)
}

/// Kernels, gates and output of the 1D model at one sample position.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample1d {
    pub x: f64,
    pub kernels: Vec<f64>,
    pub gates: Vec<f64>,
    pub y: f64,
}

/// Evaluates the 1D model `kᵢ = exp(−Σᵢ(x−μᵢ)²)`, `gᵢ = kᵢ/Σkⱼ`,
/// `y = Σ wᵢgᵢ` at every sample and keeps the intermediate values.
pub fn eval_1d(
    centers: &[f64],
    precisions: &[f64],
    weights: &[f64],
    samples: &[f64],
) -> Result<Vec<Sample1d>> {
    if centers.is_empty() {
        return Err(invalid("1D model needs at least one kernel"));
    }
    if centers.len() != precisions.len() || centers.len() != weights.len() {
        return Err(invalid(format!(
            "parameter lists differ in length: {} centers, {} precisions, {} weights",
            centers.len(),
            precisions.len(),
            weights.len()
        )));
    }
    Ok(samples
        .iter()
        .map(|&x| {
            let exponents: Vec<f64> = centers
                .iter()
                .zip(precisions)
                .map(|(mu, p)| -p * (x - mu) * (x - mu))
                .collect();
            let kernels: Vec<f64> = exponents.iter().map(|e| e.exp()).collect();
            let gates = softmax(&exponents);
            let y = gates.iter().zip(weights).map(|(g, w)| g * w).sum();
            Sample1d {
                x,
                kernels,
                gates,
                y,
            }
        })
        .collect())
}

pub fn decode_1d(
    centers: &[f64],
    precisions: &[f64],
    weights: &[f64],
    samples: &[f64],
) -> Result<Vec<f64>> {
    Ok(eval_1d(centers, precisions, weights, samples)?
        .into_iter()
        .map(|s| s.y)
        .collect())
}

/// The dense unit-interval grid `0, 1e-4, …, 1` (10001 samples).
pub fn unit_grid_1d() -> Vec<f64> {
    (0..=10_000).map(|i| i as f64 / 10_000.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_kernel(mu: (f64, f64), w: f64) -> Kernel2D {
        Kernel2D {
            mu_x: mu.0,
            mu_y: mu.1,
            a: 0.0,
            b: 0.0,
            c: 0.0,
            w,
            prior_logit: 0.0,
        }
    }

    #[test]
    fn kernel_values() {
        let k = identity_kernel((0.3, 0.4), 0.0);
        assert_eq!(kernel_eval(&k, (0.3, 0.4)), 1.0);
        assert!((kernel_eval(&k, (0.3, 0.6)) - (-0.02f64).exp()).abs() < 1e-15);
        assert!((kernel_eval(&k, (0.3, 0.6)) - 0.980199).abs() < 1e-6);

        // Σ⁻¹ = diag(100, 1)
        let aniso = Kernel2D {
            a: 10f64.ln(),
            ..identity_kernel((0.5, 0.5), 0.0)
        };
        let p = aniso.precision();
        assert!((p[0][0] - 100.0).abs() < 1e-12 && (p[1][1] - 1.0).abs() < 1e-12);
        assert!(kernel_eval(&aniso, (0.6, 0.5)) < kernel_eval(&aniso, (0.5, 0.6)));
    }

    #[test]
    fn gate_examples() {
        let one = SmoeModel::new(vec![identity_kernel((0.2, 0.2), 1.0)], 8).unwrap();
        assert_eq!(gates_eval(&one, (0.9, 0.1)), vec![1.0]);

        let twin = SmoeModel::new(vec![identity_kernel((0.2, 0.7), 0.0); 2], 8).unwrap();
        assert_eq!(gates_eval(&twin, (0.4, 0.4)), vec![0.5, 0.5]);

        let mut k1 = identity_kernel((0.5, 0.5), 0.0);
        let mut k2 = k1;
        k1.prior_logit = 0.8f64.ln();
        k2.prior_logit = 0.2f64.ln();
        let m = SmoeModel::new(vec![k1, k2], 8).unwrap();
        let g = gates_eval(&m, (0.1, 0.9));
        assert!((g[0] - 0.8).abs() < 1e-12 && (g[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn underflowing_kernels_fall_back_to_best_log_score() {
        // both kernels are ~exp(-1e6) at x; plain normalization would be 0/0
        let narrow = |mu: f64| Kernel2D {
            a: 8.0,
            c: 8.0,
            ..identity_kernel((mu, 0.5), 0.0)
        };
        let m = SmoeModel::new(vec![narrow(0.0), narrow(0.1)], 8).unwrap();
        let g = gates_eval(&m, (0.9, 0.5));
        assert!(g.iter().all(|v| v.is_finite()));
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g[1] > 0.999);
    }

    #[test]
    fn decode_examples() {
        let grid = SampleGrid::new(8);
        let single = SmoeModel::new(vec![identity_kernel((0.1, 0.9), 0.7)], 8).unwrap();
        assert!(decode(&single, &grid)
            .values()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));

        let two = SmoeModel::new(
            vec![
                identity_kernel((0.25, 0.5), 0.0),
                identity_kernel((0.75, 0.5), 1.0),
            ],
            8,
        )
        .unwrap();
        let out = decode(&two, &grid);
        for j in 0..8 {
            for i in 1..8 {
                assert!(out.at(i, j) >= out.at(i - 1, j));
            }
        }
        assert!(out.at(7, 0) > out.at(0, 0));
    }

    #[test]
    fn init_layout() {
        let patch = Patch::filled(8, 0.35);
        let m = init_model(&patch, 4).unwrap();
        let centers: Vec<_> = m.kernels.iter().map(|k| (k.mu_x, k.mu_y)).collect();
        assert_eq!(
            centers,
            vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
        );
        assert!(m
            .kernels
            .iter()
            .all(|k| k.w == 0.35 && k.b == 0.0 && k.prior_logit == 0.0));
        assert!((m.kernels[0].a - 4f64.ln()).abs() < 1e-15);

        let one = init_model(&patch, 1).unwrap();
        assert_eq!((one.kernels[0].mu_x, one.kernels[0].mu_y), (0.5, 0.5));

        let three = init_model(&patch, 3).unwrap();
        assert_eq!(three.len(), 3);
        assert!(init_model(&patch, 0).is_err());

        let out = decode(&m, &SampleGrid::new(8));
        assert!(out.values().iter().all(|&v| (v - 0.35).abs() < 1e-12));
    }

    #[test]
    fn grid_positions() {
        let g = SampleGrid::new(4);
        assert_eq!(g.positions()[0], (0.125, 0.125));
        assert_eq!(g.positions()[1], (0.375, 0.125));
        assert_eq!(g.positions()[15], (0.875, 0.875));
        assert!(g
            .positions()
            .iter()
            .all(|&(x, y)| x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0));
    }

    #[test]
    fn text_roundtrip() {
        let m = SmoeModel::new(
            vec![
                Kernel2D {
                    mu_x: 0.1,
                    mu_y: 0.2,
                    a: 1.5,
                    b: -0.3,
                    c: 0.25,
                    w: 0.6,
                    prior_logit: -1.0 / 3.0,
                },
                identity_kernel((0.9, 0.8), 0.1),
            ],
            8,
        )
        .unwrap();
        let text = m.to_text();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(SmoeModel::from_text(&text, 8).unwrap(), m);
        assert!(SmoeModel::from_text("1 2 3\n", 8).is_err());
        assert!(SmoeModel::from_text("# nothing\n", 8).is_err());
    }

    #[test]
    fn one_dimensional_examples() {
        let flat = decode_1d(&[0.4], &[50.0], &[0.3], &[0.0, 0.5, 1.0]).unwrap();
        assert!(flat.iter().all(|&y| (y - 0.3).abs() < 1e-15));

        let centers = [0.12, 0.55, 0.65];
        let ys = decode_1d(&centers, &[500.0; 3], &[0.2, 0.8, 0.4], &[0.12]).unwrap();
        assert!((ys[0] - 0.2).abs() < 1e-3);

        assert!(decode_1d(&[0.1, 0.2], &[1.0], &[1.0, 2.0], &[0.0]).is_err());
        assert_eq!(unit_grid_1d().len(), 10_001);
    }
}
