use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bmsmoe::assessment::serialize_db;
use bmsmoe::fitting::fit_patch_traced;
use bmsmoe::pipeline::group_seed;
use bmsmoe::smoe::{eval_1d, unit_grid_1d};
use bmsmoe::{
    add_speckle, denoise_image, extract_patch, load_image, match_block, plan_references, psnr,
    save_image, QualityReport,
};

use crate::config::RunConfig;
use crate::CliError;

/// Kernel centers of the 1D demonstration model.
pub const DEMO_CENTERS: [f64; 3] = [0.12, 0.55, 0.65];
pub const DEMO_PRECISION: f64 = 500.0;
pub const DEMO_WEIGHTS: [f64; 3] = [0.2, 0.8, 0.4];

fn check_input(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Io(format!(
            "input {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn check_output(path: &Path) -> Result<(), CliError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        if !dir.is_dir() {
            return Err(CliError::Io(format!(
                "output directory {} does not exist",
                dir.display()
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Sidecar file holding the denoising statistics for `out`.
pub fn stats_path(out: &Path) -> PathBuf {
    with_suffix(out, ".stats.json")
}

pub fn trace_path(out: &Path) -> PathBuf {
    with_suffix(out, ".trace.csv")
}

fn resolve(
    arg: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    arg.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} path given")))
}

pub fn cmd_denoise(
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let input = resolve(input, &cfg.input, "input")?;
    let output = resolve(output, &cfg.output, "output")?;
    cfg.validate()?;
    check_input(&input)?;
    check_output(&output)?;

    let noisy = load_image(&input)?;
    let (denoised, stats) = denoise_image(&noisy, &cfg.denoise)?;
    save_image(&denoised, &output)?;
    let json = serde_json::to_string(&stats).expect("stats serialize");
    write_file(&stats_path(&output), json.as_bytes())?;

    if cfg.trace {
        // trace of the reference-patch fit in the first group
        let bm = &cfg.denoise.bm;
        let (x, y) = plan_references(noisy.width(), noisy.height(), bm)?[0];
        let patch = extract_patch(&noisy, (x, y), bm.k)?;
        let mut rows = Vec::new();
        fit_patch_traced(
            &patch,
            cfg.denoise.kernels,
            &cfg.denoise.fit,
            group_seed(cfg.denoise.seed, x, y),
            &mut rows,
        )?;
        let mut csv = String::from("iter,loss,lr,grad_norm\n");
        for r in rows {
            csv.push_str(&format!("{},{},{},{}\n", r.iter, r.loss, r.lr, r.grad_norm));
        }
        write_file(&trace_path(&output), csv.as_bytes())?;
    }
    eprintln!(
        "denoised {} -> {} ({} groups, {} patches, mean loss {:.5})",
        input.display(),
        output.display(),
        stats.groups,
        stats.patches,
        stats.mean_loss
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct PsnrOnly {
    #[serde(serialize_with = "serialize_db")]
    psnr: f64,
}

pub fn cmd_simulate(
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    cfg: &RunConfig,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let input = resolve(input, &cfg.input, "input")?;
    let output = resolve(output, &cfg.output, "output")?;
    cfg.validate()?;
    check_input(&input)?;
    check_output(&output)?;

    let clean = load_image(&input)?;
    let noisy = add_speckle(&clean, &cfg.noise)?;
    save_image(&noisy, &output)?;
    let report = PsnrOnly {
        psnr: psnr(&noisy, &clean)?,
    };
    writeln!(
        stdout,
        "{}",
        serde_json::to_string(&report).expect("serialize")
    )
    .map_err(CliError::stdout)?;
    Ok(())
}

pub fn cmd_evaluate(a: &Path, b: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    check_input(a)?;
    check_input(b)?;
    let img_a = load_image(a)?;
    let img_b = load_image(b)?;
    if !img_a.same_dims(&img_b) {
        return Err(CliError::Config(format!(
            "dimension mismatch: {} is {}x{}, {} is {}x{}",
            a.display(),
            img_a.width(),
            img_a.height(),
            b.display(),
            img_b.width(),
            img_b.height()
        )));
    }
    let report = QualityReport::compare(&img_a, &img_b)?;
    writeln!(
        stdout,
        "{}",
        serde_json::to_string(&report).expect("serialize")
    )
    .map_err(CliError::stdout)?;
    Ok(())
}

pub fn demo_1d_csv(precision: f64, weights: &[f64; 3]) -> Result<String, CliError> {
    let samples = eval_1d(&DEMO_CENTERS, &[precision; 3], weights, &unit_grid_1d())?;
    let mut csv = String::with_capacity(samples.len() * 96);
    csv.push_str("x,k1,k2,k3,g1,g2,g3,y\n");
    for s in samples {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.x, s.kernels[0], s.kernels[1], s.kernels[2], s.gates[0], s.gates[1], s.gates[2], s.y
        ));
    }
    Ok(csv)
}

pub fn cmd_demo_1d(out: &Path, precision: f64, weights: &[f64; 3]) -> Result<(), CliError> {
    check_output(out)?;
    let csv = demo_1d_csv(precision, weights)?;
    write_file(out, csv.as_bytes())
}

pub fn cmd_match_dump(
    input: &Path,
    reference: (usize, usize),
    cfg: &RunConfig,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    cfg.validate()?;
    check_input(input)?;
    let img = load_image(input)?;
    let stack = match_block(&img, reference, &cfg.denoise.bm)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut csv = String::from("ref_x,ref_y,member_x,member_y,distance\n");
    for row in bmsmoe::block_matching::stack_csv_rows(&stack) {
        csv.push_str(&row);
        csv.push('\n');
    }
    match out {
        Some(path) => {
            check_output(path)?;
            write_file(path, csv.as_bytes())
        }
        None => stdout.write_all(csv.as_bytes()).map_err(CliError::stdout),
    }
}
