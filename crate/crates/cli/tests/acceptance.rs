//! Release acceptance gate. Runs every criterion, prints one PASS/FAIL line
//! each, and exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p bmsmoe-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bmsmoe::block_matching::Member;
use bmsmoe::fitting::SSIM_C1;
use bmsmoe::{
    add_speckle, composite_loss, decode, extract_patch, fit_patch, gates_eval, gmsd, loss_gradient,
    match_block, patch_distance, plan_references, psnr, save_image, ssim_block, ssim_image,
    BlockMatchConfig, DenoiseConfig, FitConfig, ImageBuffer, Kernel2D, NoiseConfig, Patch,
    SampleGrid, SmoeModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(name: &str, elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed <= budget, || {
        format!(
            "{name} took {:.2}s, budget {:.0}s",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        )
    })
}

fn random_kernel(rng: &mut ChaCha8Rng) -> Kernel2D {
    Kernel2D {
        mu_x: rng.random_range(0.0..1.0),
        mu_y: rng.random_range(0.0..1.0),
        a: rng.random_range(-1.0..2.5),
        b: rng.random_range(-3.0..3.0),
        c: rng.random_range(-1.0..2.5),
        w: rng.random_range(0.0..1.0),
        prior_logit: rng.random_range(-2.0..2.0),
    }
}

fn random_model(rng: &mut ChaCha8Rng, kernels: usize) -> SmoeModel {
    SmoeModel::new((0..kernels).map(|_| random_kernel(rng)).collect(), 8).unwrap()
}

fn random_patch(rng: &mut ChaCha8Rng) -> Patch {
    Patch::new(
        8,
        (0, 0),
        (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// Piecewise-constant test image: 0.2 above the main diagonal,
/// 0.8 below it, and a 0.5 square in the middle.
fn phantom(size: usize) -> ImageBuffer {
    let (lo, hi) = (size * 5 / 16, size * 11 / 16);
    ImageBuffer::from_fn(size, size, |x, y| {
        if (lo..hi).contains(&x) && (lo..hi).contains(&y) {
            0.5
        } else if x > y {
            0.8
        } else {
            0.2
        }
    })
    .unwrap()
}

// ---------------------------------------------------------------------------

fn reproducibility_statement() -> Outcome {
    // Published table values depend on a trained encoder and external
    // datasets; the property and oracle criteria below stand in for them.
    Ok("published dataset numbers not reproduced; substituted by the criteria below".into())
}

fn partition_of_unity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let kernels = rng.random_range(1..=16);
        let model = random_model(&mut rng, kernels);
        for _ in 0..100 {
            let x = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let g = gates_eval(&model, x);
            ensure(g.iter().all(|&v| v >= 0.0), || "negative gate".into())?;
            worst = worst.max((g.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max |sum g - 1| = {worst:e}"))?;
    within_budget(
        "partition of unity",
        start.elapsed(),
        Duration::from_secs(5),
    )?;
    Ok(format!("max |sum g - 1| = {worst:.2e} over 100000 points"))
}

fn central_difference(model: &SmoeModel, target: &Patch, cfg: &FitConfig) -> Vec<f64> {
    let h = 1e-5;
    let grid = SampleGrid::new(8);
    let base = model.to_params();
    let loss = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p);
        composite_loss(&decode(&m, &grid), target, cfg).unwrap()
    };
    (0..base.len())
        .map(|i| {
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus[i] += h;
            minus[i] -= h;
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        })
        .collect()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = SampleGrid::new(8);
    let cfg = FitConfig::default();
    let mut worst = 0.0f64;
    for pair in 0..100 {
        let kernels = [1, 2, 4][pair % 3];
        let model = random_model(&mut rng, kernels);
        let target = random_patch(&mut rng);
        let analytic = loss_gradient(&model, &target, &grid, &cfg).map_err(|e| e.to_string())?;
        let numeric = central_difference(&model, &target, &cfg);
        for (i, (a, f)) in analytic.iter().zip(&numeric).enumerate() {
            let diff = (a - f).abs();
            let scale = a.abs().max(f.abs());
            let tol = (1e-4 * scale).max(1e-6);
            ensure(diff <= tol, || {
                format!("pair {pair} param {i}: analytic {a:e} vs numeric {f:e}")
            })?;
            worst = worst.max(diff / tol);
        }
    }
    within_budget("gradient oracle", start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "100 pairs, worst error at {:.1}% of tolerance",
        100.0 * worst
    ))
}

fn exhaustive_match(
    img: &ImageBuffer,
    reference: (usize, usize),
    cfg: &BlockMatchConfig,
) -> Vec<Member> {
    let refp = extract_patch(img, reference, cfg.k).unwrap();
    let r = cfg.search_radius;
    let mut found = Vec::new();
    for y in 0..=img.height() - cfg.k {
        for x in 0..=img.width() - cfg.k {
            if x.abs_diff(reference.0) > r || y.abs_diff(reference.1) > r || (x, y) == reference {
                continue;
            }
            let d =
                patch_distance(&refp, &extract_patch(img, (x, y), cfg.k).unwrap(), cfg).unwrap();
            if d <= cfg.tau_hard {
                found.push((d, y, x));
            }
        }
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    std::iter::once(Member {
        origin: reference,
        distance: 0.0,
    })
    .chain(
        found
            .into_iter()
            .take(cfg.n_hard - 1)
            .map(|(d, y, x)| Member {
                origin: (x, y),
                distance: d,
            }),
    )
    .collect()
}

fn block_matching_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0;
    for image in 0..20 {
        // half the images use a few quantized levels so exact ties occur
        let levels: u32 = if image % 2 == 0 {
            rng.random_range(2..5)
        } else {
            0
        };
        let img = ImageBuffer::from_fn(64, 64, |_, _| {
            if levels > 0 {
                rng.random_range(0..levels) as f64 / (levels - 1) as f64
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .unwrap();
        let cfg = BlockMatchConfig {
            tau_hard: if levels > 0 { 0.3 } else { 0.17 },
            ..Default::default()
        };
        let refs = plan_references(64, 64, &cfg).unwrap();
        for _ in 0..8 {
            let reference = refs[rng.random_range(0..refs.len())];
            let got = match_block(&img, reference, &cfg).map_err(|e| e.to_string())?;
            let want = exhaustive_match(&img, reference, &cfg);
            ensure(got.members.len() == want.len(), || {
                format!(
                    "image {image} ref {reference:?}: {} vs {} members",
                    got.members.len(),
                    want.len()
                )
            })?;
            for (g, w) in got.members.iter().zip(&want) {
                ensure(
                    g.origin == w.origin && (g.distance - w.distance).abs() <= 1e-12,
                    || format!("image {image} ref {reference:?}: {g:?} vs {w:?}"),
                )?;
            }
            compared += 1;
        }
    }
    within_budget(
        "block matching oracle",
        start.elapsed(),
        Duration::from_secs(30),
    )?;
    Ok(format!(
        "{compared} stacks on 20 images identical to exhaustive search"
    ))
}

fn end_to_end_gain() -> Outcome {
    let clean = phantom(128);
    let noisy = add_speckle(
        &clean,
        &NoiseConfig {
            sigma: 0.2,
            seed: 7,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let cfg = DenoiseConfig {
        seed: 7,
        workers: 1,
        ..Default::default()
    };
    let start = Instant::now();
    let (out, _) = bmsmoe::denoise_image(&noisy, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (p0, p1) = (psnr(&clean, &noisy).unwrap(), psnr(&clean, &out).unwrap());
    let (s0, s1) = (
        ssim_image(&clean, &noisy).unwrap(),
        ssim_image(&clean, &out).unwrap(),
    );
    let summary = format!(
        "PSNR {p0:.2} -> {p1:.2} dB, SSIM {s0:.3} -> {s1:.3}, {:.1}s serial",
        elapsed.as_secs_f64()
    );
    ensure(p1 >= p0 + 3.0, || {
        format!("PSNR gain below 3 dB: {summary}")
    })?;
    ensure(s1 >= s0 + 0.15, || {
        format!("SSIM gain below 0.15: {summary}")
    })?;
    within_budget("end-to-end", elapsed, Duration::from_secs(300))?;
    Ok(summary)
}

fn run_cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bmsmoe"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "bmsmoe {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        )
    })?;
    Ok(out)
}

fn without_timing(stats_json: &str) -> Result<serde_json::Value, String> {
    let mut v: serde_json::Value = serde_json::from_str(stats_json).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().ok_or("stats is not an object")?;
    obj.remove("encode_s");
    obj.remove("decode_s");
    Ok(v)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clean = phantom(48);
    let noisy = add_speckle(
        &clean,
        &NoiseConfig {
            sigma: 0.2,
            seed: 7,
            ..Default::default()
        },
    )
    .unwrap();
    let input = dir.path().join("noisy.pgm");
    save_image(&noisy, &input).map_err(|e| e.to_string())?;

    let mut images = Vec::new();
    let mut stats = Vec::new();
    for workers in ["1", "4"] {
        let out = dir.path().join(format!("out{workers}.pgm"));
        run_cli(&[
            "denoise",
            input.to_str().unwrap(),
            out.to_str().unwrap(),
            "--seed",
            "7",
            "--workers",
            workers,
        ])?;
        images.push(std::fs::read(&out).map_err(|e| e.to_string())?);
        let sidecar = std::fs::read_to_string(bmsmoe_cli::commands::stats_path(&out))
            .map_err(|e| e.to_string())?;
        stats.push(without_timing(&sidecar)?);
    }
    ensure(images[0] == images[1], || {
        "output images differ between 1 and 4 workers".into()
    })?;
    ensure(stats[0] == stats[1], || {
        format!("stats differ: {} vs {}", stats[0], stats[1])
    })?;
    Ok(format!(
        "{} output bytes identical, stats {}",
        images[0].len(),
        stats[0]
    ))
}

fn metric_self_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..10 {
        let (w, h) = (rng.random_range(11..48), rng.random_range(11..48));
        let a = ImageBuffer::from_fn(w, h, |_, _| rng.random_range(0.0..1.0)).unwrap();
        let b = ImageBuffer::from_fn(w, h, |_, _| rng.random_range(0.0..1.0)).unwrap();
        ensure(psnr(&a, &a).unwrap() == f64::INFINITY, || {
            format!("image {i}: psnr(a,a) finite")
        })?;
        let s = ssim_image(&a, &a).unwrap();
        ensure(s == 1.0, || format!("image {i}: ssim(a,a) = {s}"))?;
        let g = gmsd(&a, &a).unwrap();
        ensure(g == 0.0, || format!("image {i}: gmsd(a,a) = {g}"))?;
        let (ab, ba) = (ssim_image(&a, &b).unwrap(), ssim_image(&b, &a).unwrap());
        ensure(ab == ba, || {
            format!("image {i}: ssim asymmetric {ab} vs {ba}")
        })?;
    }
    Ok("10 random images: psnr inf, ssim 1, gmsd 0, ssim symmetric".into())
}

fn composite_loss_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mse_only = FitConfig {
        lambda_mse: 1.0,
        lambda_ssim: 0.0,
        ..Default::default()
    };
    let ssim_only = FitConfig {
        lambda_mse: 0.0,
        lambda_ssim: 1.0,
        ..Default::default()
    };
    for _ in 0..50 {
        let (p, t) = (random_patch(&mut rng), random_patch(&mut rng));
        let zero = composite_loss(&t, &t, &FitConfig::default()).unwrap();
        ensure(zero == 0.0, || format!("loss(target, target) = {zero}"))?;
        let mse: f64 = p
            .values()
            .iter()
            .zip(t.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 64.0;
        let got = composite_loss(&p, &t, &mse_only).unwrap();
        ensure((got - mse).abs() <= 1e-12, || {
            format!("MSE isolation: {got} vs {mse}")
        })?;
        let dssim = 1.0 - ssim_block(&p, &t).unwrap();
        let got = composite_loss(&p, &t, &ssim_only).unwrap();
        ensure((got - dssim).abs() <= 1e-12, || {
            format!("SSIM isolation: {got} vs {dssim}")
        })?;
    }
    let c = ssim_block(&Patch::filled(8, 0.0), &Patch::filled(8, 1.0)).unwrap();
    ensure((c - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-15, || {
        format!("ssim(0, 1) = {c}")
    })?;
    Ok("zero at target; MSE and 1-SSIM isolation within 1e-12".into())
}

fn fit_sanity() -> Outcome {
    let cfg = FitConfig::default();
    let constant = Patch::filled(8, 0.5);
    let fit = fit_patch(&constant, 4, &cfg, 7).map_err(|e| e.to_string())?;
    let decoded = decode(&fit.model, &SampleGrid::new(8));
    let mse: f64 = decoded
        .values()
        .iter()
        .map(|v| (v - 0.5) * (v - 0.5))
        .sum::<f64>()
        / 64.0;
    ensure(mse <= 1e-6 && fit.iterations <= 300, || {
        format!("constant patch MSE {mse:e}")
    })?;

    let edge = Patch::new(
        8,
        (0, 0),
        (0..64).map(|i| if i % 8 < 4 { 0.2 } else { 0.8 }).collect(),
    )
    .unwrap();
    let fit = fit_patch(&edge, 4, &cfg, 7).map_err(|e| e.to_string())?;
    let ratio = fit.loss / fit.initial_loss;
    ensure(ratio <= 0.2, || {
        format!(
            "step edge loss {:.4e} -> {:.4e} (ratio {ratio:.3})",
            fit.initial_loss, fit.loss
        )
    })?;
    Ok(format!(
        "constant MSE {mse:.1e}; step edge loss {:.3e} -> {:.3e} (ratio {ratio:.4})",
        fit.initial_loss, fit.loss
    ))
}

fn demo_1d() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("demo.csv");
    run_cli(&["demo-1d", path.to_str().unwrap()])?;
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    ensure(lines.next() == Some("x,k1,k2,k3,g1,g2,g3,y"), || {
        "bad header".into()
    })?;
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    ensure(rows.len() == 10_001, || format!("{} rows", rows.len()))?;
    for (i, r) in rows.iter().enumerate() {
        let s = r[4] + r[5] + r[6];
        ensure((s - 1.0).abs() <= 1e-9, || {
            format!("row {i}: gates sum to {s}")
        })?;
    }
    for (col, center) in [(1, 0.12), (2, 0.55), (3, 0.65)] {
        let (argmax, max) = rows.iter().enumerate().map(|(i, r)| (i, r[col])).fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
        );
        ensure(max == 1.0 && rows[argmax][0] == center, || {
            format!("k{col} peaks at x = {} with {max}", rows[argmax][0])
        })?;
    }
    Ok("10001 rows; gates sum to 1; kernels peak at 1.0 on their centers".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        (
            "published-number reproducibility (substituted)",
            reproducibility_statement,
        ),
        ("partition of unity", partition_of_unity),
        ("gradient vs finite differences", gradient_oracle),
        ("block matching vs exhaustive search", block_matching_oracle),
        ("end-to-end denoising gain", end_to_end_gain),
        ("determinism across worker counts", determinism),
        ("metric self-consistency", metric_self_consistency),
        ("composite loss contract", composite_loss_contract),
        ("fit sanity", fit_sanity),
        ("1D demo CSV", demo_1d),
    ];
    // the binary under test must exist
    assert!(Path::new(env!("CARGO_BIN_EXE_bmsmoe")).exists());

    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.2}s): {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", 10);
}
