//! `bcd` — command-line front end for the scalable bit-plane codec.
//!
//! Exit codes: 0 success, 2 usage or config errors (including missing
//! files), 3 data or contract errors (corrupt containers, levels truncated
//! away, images the codec cannot take).

mod config;

use bcd_core::bitplane::{BitPlanes, RgbImage};
use bcd_core::codec::{self, BinarizerMode, CodecModel};
use bcd_core::container::{header_len, truncate_container_bytes, Container};
use bcd_core::error::Error;
use bcd_core::metrics;
use bcd_core::ppm;
use bcd_core::train;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "bcd", version, about = "Scalable bit-plane image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a PPM image into a progressive .bcd container
    Encode {
        /// Input image (binary PPM)
        #[arg(long)]
        image: PathBuf,
        /// Trained model checkpoint (.bcdm)
        #[arg(long)]
        model: PathBuf,
        /// Output container path
        #[arg(long)]
        out: PathBuf,
        /// Per-branch switches, e.g. "11000000"; default all on
        #[arg(long)]
        mask: Option<String>,
    },
    /// Decode a container at a quality level
    Decode {
        /// Input container (.bcd)
        #[arg(long)]
        input: PathBuf,
        /// Model checkpoint the container was encoded with
        #[arg(long)]
        model: PathBuf,
        /// Output image path (.ppm; .png with the png build feature)
        #[arg(long)]
        out: PathBuf,
        /// Quality level (1 = coarsest)
        #[arg(long)]
        level: Option<usize>,
        /// Decode every available level to out-derived paths
        #[arg(long)]
        all_levels: bool,
    },
    /// Drop all branches above a level from a container
    Truncate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Highest level to keep
        #[arg(long)]
        level: usize,
    },
    /// Train a model on a directory of PPM images
    Train {
        /// key=value config file
        #[arg(long)]
        config: PathBuf,
        /// Directory of training images
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path (.bcdm)
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV path; defaults to the checkpoint with a .csv suffix
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override the step count from the config file
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Rate-distortion CSV (image,level,bpp,psnr,ms_ssim) over a directory
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-channel bit-plane entropy report
    AnalyzeBitplanes {
        #[arg(long)]
        image: PathBuf,
        /// Number of significance levels to analyze
        #[arg(long, default_value_t = 8)]
        levels: usize,
    },
}

struct CliError {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: 2, message: message.into() }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::InvalidArgument(_) | Error::InvalidConfig(_) => 2,
        _ => 3,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { code: exit_code_for(&e), message: e.to_string() }
    }
}

/// Attach the offending path to an error message.
fn at_path<T>(path: &Path, r: bcd_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError {
        code: exit_code_for(&e),
        message: format!("{}: {}", path.display(), e),
    })
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Encode { image, model, out, mask } => cmd_encode(&image, &model, &out, mask),
        Command::Decode { input, model, out, level, all_levels } => {
            cmd_decode(&input, &model, &out, level, all_levels)
        }
        Command::Truncate { input, out, level } => cmd_truncate(&input, &out, level),
        Command::Train { config, data, out, log, steps } => {
            cmd_train(&config, &data, &out, log, steps)
        }
        Command::Eval { data, model, out } => cmd_eval(&data, &model, out.as_deref()),
        Command::AnalyzeBitplanes { image, levels } => cmd_analyze(&image, levels),
    }
}

/// Training seed precedence: BCD_SEED env var, then the config file.
fn resolve_seed(fallback: u64) -> Result<u64, CliError> {
    match std::env::var("BCD_SEED") {
        Ok(s) => s
            .parse()
            .map_err(|_| usage(format!("BCD_SEED must be an unsigned integer, got {:?}", s))),
        Err(_) => Ok(fallback),
    }
}

fn load_model(path: &Path) -> Result<CodecModel<f32>, CliError> {
    at_path(path, codec::read_model_file(path))
}

fn read_image(path: &Path) -> Result<RgbImage, CliError> {
    at_path(path, ppm::read_ppm_file(path))
}

fn write_image(path: &Path, img: &RgbImage) -> Result<(), CliError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|s| s.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => write_png(path, img),
        _ => at_path(path, ppm::write_ppm_file(path, img)),
    }
}

#[cfg(feature = "png")]
fn write_png(path: &Path, img: &RgbImage) -> Result<(), CliError> {
    let buf = image::RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.data().to_vec(),
    )
    .expect("raster size matches dimensions");
    buf.save(path)
        .map_err(|e| CliError { code: 2, message: format!("{}: {}", path.display(), e) })
}

#[cfg(not(feature = "png"))]
fn write_png(path: &Path, _img: &RgbImage) -> Result<(), CliError> {
    Err(usage(format!(
        "{}: PNG output needs a build with the `png` feature; use a .ppm path",
        path.display()
    )))
}

fn parse_mask(mask: Option<String>, branches: usize) -> Result<Vec<bool>, CliError> {
    let Some(text) = mask else {
        return Ok(vec![true; branches]);
    };
    if text.len() != branches {
        return Err(usage(format!(
            "mask {:?} has {} digits, model has {} branches",
            text,
            text.len(),
            branches
        )));
    }
    text.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(usage(format!("mask digit {:?} is not 0 or 1", c))),
        })
        .collect()
}

fn cmd_encode(
    image: &Path,
    model_path: &Path,
    out: &Path,
    mask: Option<String>,
) -> Result<(), CliError> {
    let mut model = load_model(model_path)?;
    // inference always binarizes by sign; stochastic sampling is for training
    model.config.binarizer = BinarizerMode::Deterministic;
    let img = read_image(image)?;
    let mask = parse_mask(mask, model.config.branches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = codec::encode(&model, &img, &mask, &mut rng)?;
    let container = Container::from_codes(&enc)?;
    at_path(out, container.write_file(out))?;
    for level in 1..=container.branches() {
        println!("level {}: {:.6} bpp", level, container.measured_bpp(level));
    }
    println!("header: {} bytes", header_len(container.branches()));
    Ok(())
}

/// Check that a container's geometry matches the model it is decoded with.
fn check_compat(c: &Container, model: &CodecModel<f32>) -> Result<(), CliError> {
    let cfg = &model.config;
    if c.branches() != cfg.branches
        || c.binary_channels != cfg.binary_channels
        || c.spatial_factor != cfg.spatial_factor()
    {
        return Err(CliError {
            code: 3,
            message: format!(
                "container geometry (N={}, B={}, s={}) does not match model config (N={}, B={}, s={})",
                c.branches(),
                c.binary_channels,
                c.spatial_factor,
                cfg.branches,
                cfg.binary_channels,
                cfg.spatial_factor()
            ),
        });
    }
    Ok(())
}

fn level_path(out: &Path, level: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("reconstruction");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("ppm");
    out.with_file_name(format!("{stem}.l{level}.{ext}"))
}

fn cmd_decode(
    input: &Path,
    model_path: &Path,
    out: &Path,
    level: Option<usize>,
    all_levels: bool,
) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let container = at_path(input, Container::read_file(input))?;
    check_compat(&container, &model)?;
    if all_levels {
        let available = container.available_levels();
        if available == 0 {
            return Err(CliError { code: 3, message: "container holds no decodable levels".into() });
        }
        for l in 1..=available {
            let enc = container.to_codes::<f32>(l)?;
            let rec = codec::decode(&model, &enc, l)?;
            let path = level_path(out, l);
            write_image(&path, &rec.image)?;
            println!("level {} -> {}", l, path.display());
        }
        Ok(())
    } else {
        let level = level.ok_or_else(|| usage("--level is required unless --all-levels"))?;
        let enc = container.to_codes::<f32>(level)?;
        let rec = codec::decode(&model, &enc, level)?;
        write_image(out, &rec.image)?;
        println!("level {} -> {}", level, out.display());
        Ok(())
    }
}

fn cmd_truncate(input: &Path, out: &Path, level: usize) -> Result<(), CliError> {
    let bytes = std::fs::read(input)
        .map_err(|e| usage(format!("{}: {}", input.display(), e)))?;
    let truncated = truncate_container_bytes(&bytes, level)?;
    std::fs::write(out, &truncated)
        .map_err(|e| usage(format!("{}: {}", out.display(), e)))?;
    println!(
        "kept levels 1..={}, {} -> {} bytes",
        level,
        bytes.len(),
        truncated.len()
    );
    Ok(())
}

/// All .ppm files in a directory, sorted by name.
fn load_dataset(dir: &Path) -> Result<Vec<(String, RgbImage)>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| usage(format!("{}: {}", dir.display(), e)))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("{}: no .ppm images found", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("image")
                .to_string();
            Ok((name, read_image(&p)?))
        })
        .collect()
}

fn cmd_train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    log_path: Option<PathBuf>,
    steps: Option<usize>,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| usage(format!("{}: {}", config_path.display(), e)))?;
    let mut run = config::parse_run_config(&text).map_err(usage)?;
    if let Some(s) = steps {
        run.train.steps = s;
    }
    run.train.seed = resolve_seed(run.train.seed)?;
    let images: Vec<RgbImage> = load_dataset(data)?.into_iter().map(|(_, img)| img).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
    let mut model = CodecModel::<f32>::init(run.codec.clone(), &mut rng)?;
    let log = if run.train.steps > 0 {
        train::train(&mut model, &images, &run.train)?
    } else {
        Vec::new()
    };
    at_path(out, codec::write_model_file(out, &model))?;

    let log_path = log_path.unwrap_or_else(|| out.with_extension("csv"));
    let mut csv = String::from("step,level,distortion,loss,bpp_estimate\n");
    for row in &log {
        writeln!(
            csv,
            "{},{},{:.8},{:.8},{:.6}",
            row.step, row.level, row.distortion, row.loss, row.bpp_estimate
        )
        .expect("string formatting");
    }
    std::fs::write(&log_path, csv)
        .map_err(|e| usage(format!("{}: {}", log_path.display(), e)))?;
    if let Some(last) = log.last() {
        println!(
            "{} steps, final loss {:.6}; checkpoint {}, log {}",
            run.train.steps,
            last.loss,
            out.display(),
            log_path.display()
        );
    } else {
        println!(
            "0 steps, initialized checkpoint {}, log {}",
            out.display(),
            log_path.display()
        );
    }
    Ok(())
}

fn cmd_eval(data: &Path, model_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let mut model = load_model(model_path)?;
    model.config.binarizer = BinarizerMode::Deterministic;
    let images = load_dataset(data)?;
    let n = model.config.branches;
    let mask = vec![true; n];
    let mut csv = String::from("image,level,bpp,psnr,ms_ssim\n");
    let mut failures = 0usize;
    for (name, img) in &images {
        let result = (|| -> bcd_core::Result<Vec<String>> {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let enc = codec::encode(&model, img, &mask, &mut rng)?;
            let container = Container::from_codes(&enc)?;
            let target = img.to_tensor::<f32>();
            let mut rows = Vec::with_capacity(n);
            for level in 1..=n {
                let rec = codec::decode(&model, &enc, level)?;
                let psnr = metrics::psnr(&rec.tensor, &target)?;
                let (ms, _) = metrics::ms_ssim_value(&rec.tensor, &target)?;
                rows.push(format!(
                    "{},{},{:.6},{:.4},{:.6}",
                    name,
                    level,
                    container.measured_bpp(level),
                    psnr,
                    ms
                ));
            }
            Ok(rows)
        })();
        match result {
            Ok(rows) => {
                for r in rows {
                    csv.push_str(&r);
                    csv.push('\n');
                }
            }
            Err(e) => {
                eprintln!("{}: {}", name, e);
                failures += 1;
            }
        }
    }
    match out {
        Some(path) => std::fs::write(path, &csv)
            .map_err(|e| usage(format!("{}: {}", path.display(), e)))?,
        None => print!("{}", csv),
    }
    if failures > 0 {
        return Err(CliError {
            code: 3,
            message: format!("{} image(s) failed evaluation", failures),
        });
    }
    Ok(())
}

fn cmd_analyze(image: &Path, levels: usize) -> Result<(), CliError> {
    let img = read_image(image)?;
    let planes = BitPlanes::decompose(&img, levels)?;
    for (ci, name) in ["R", "G", "B"].iter().enumerate() {
        let h_img = img.channel_entropy(ci);
        println!("channel {}: image entropy {:.4} bits", name, h_img);
        for l in 1..=levels {
            println!("  plane {} entropy: {:.4}", l, planes.plane_entropy(l, ci));
        }
        let sum = planes.channel_plane_entropy_sum(ci);
        println!("  plane entropy sum: {:.4}", sum);
        println!("  sum >= image entropy: {}", sum >= h_img);
    }
    Ok(())
}
