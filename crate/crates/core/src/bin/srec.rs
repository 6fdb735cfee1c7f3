use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use srec::codec::{
    self, io, synth, CnnModel, Constraints, Container, Options, Predictor, PredictorKind, StatsReport,
};
use srec::network::{Model, ModelConfig, WeightStore};
use srec::trainer::{self, TrainConfig};
use srec::{Error, Image, Result};

#[derive(Parser)]
#[command(
    name = "srec",
    version,
    about = "Lossless image compression through super-resolution"
)]
struct Cli {
    /// Worker threads (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CodingArgs {
    /// Network weights.
    #[arg(short = 'w', long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// uniform, heuristic or cnn; cnn when weights are given, heuristic
    /// otherwise.
    #[arg(long)]
    predictor: Option<PredictorKind>,
    /// on, off or auto.
    #[arg(long, default_value = "auto")]
    constraints: Constraints,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PPM, PNG or raw image.
    Compress {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        coding: CodingArgs,
    },
    /// Restore the image stored in a compressed file.
    Decompress {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short = 'w', long)]
        weights: Option<PathBuf>,
    },
    /// Size breakdown of a compressed file, or of an image compressed on the
    /// fly.
    Stats {
        #[arg(short, long)]
        input: PathBuf,
        #[command(flatten)]
        coding: CodingArgs,
    },
    /// Super-resolve a small image by sampling the coding distributions.
    Sample {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        coding: CodingArgs,
    },
    /// Train network weights.
    Train {
        /// Output weight file.
        #[arg(short, long)]
        output: PathBuf,
        /// key = value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value settings applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Image files or directories.
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
        /// Add this many synthetic 64×64 images to the corpus.
        #[arg(long, default_value_t = 0)]
        synthetic: usize,
        /// Report held-out bpsp on this many fresh synthetic images.
        #[arg(long, default_value_t = 0)]
        held_out: usize,
        /// Continue from these weights.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode and decode timings per image size.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        coding: CodingArgs,
    },
    /// Round-trip synthetic images through every predictor.
    Selftest,
}

fn load_model(path: &Option<PathBuf>) -> Result<Option<CnnModel>> {
    path.as_ref().map(CnnModel::load).transpose()
}

fn predictor<'a>(kind: Option<PredictorKind>, model: Option<&'a CnnModel>) -> Result<Predictor<'a>> {
    match (kind, model) {
        (None, Some(m)) | (Some(PredictorKind::Cnn), Some(m)) => Ok(Predictor::Cnn(m)),
        (Some(PredictorKind::Cnn), None) => Err(Error::Config("the cnn predictor needs -w weights".into())),
        (None, None) | (Some(PredictorKind::Heuristic), _) => Ok(Predictor::Heuristic),
        (Some(PredictorKind::Uniform), _) => Ok(Predictor::Uniform),
    }
}

fn options(coding: &CodingArgs) -> Options {
    Options {
        levels: coding.levels,
        constraints: coding.constraints,
    }
}

fn bpsp(bytes: usize, img: &Image) -> f64 {
    8.0 * bytes as f64 / (3 * img.width() * img.height()) as f64
}

fn collect_images(paths: &[PathBuf], out: &mut Vec<Image>) -> Result<()> {
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            let files: Vec<PathBuf> = entries
                .into_iter()
                .filter(|e| {
                    matches!(
                        e.extension().and_then(|x| x.to_str()),
                        Some("ppm" | "png" | "rgb" | "raw")
                    )
                })
                .collect();
            collect_images(&files, out)?;
        } else {
            out.push(io::read_image(p)?);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Compress {
            input,
            output,
            coding,
        } => {
            let img = io::read_image(&input)?;
            let model = load_model(&coding.weights)?;
            let p = predictor(coding.predictor, model.as_ref())?;
            let (container, report) = codec::compress(&img, p, &options(&coding))?;
            let bytes = container.to_bytes();
            std::fs::write(&output, &bytes)?;
            writeln!(
                out,
                "{}x{} -> {} bytes, {:.4} bpsp ({} predictor, model {:.4} bpsp)",
                img.width(),
                img.height(),
                bytes.len(),
                bpsp(bytes.len(), &img),
                p.kind(),
                report.total_nll_bits() / (3 * img.width() * img.height()) as f64,
            )?;
        }
        Command::Decompress {
            input,
            output,
            weights,
        } => {
            let container = Container::from_bytes(&std::fs::read(&input)?)?;
            let model = load_model(&weights)?;
            let img = codec::decompress(&container, model.as_ref())?;
            io::write_image(&output, &img)?;
        }
        Command::Stats { input, coding } => {
            let bytes = std::fs::read(&input)?;
            let container = if bytes.starts_with(codec::MAGIC) {
                Container::from_bytes(&bytes)?
            } else {
                let img = io::decode_image(&bytes, io::FileFormat::from_path(&input))?;
                let model = load_model(&coding.weights)?;
                let p = predictor(coding.predictor, model.as_ref())?;
                codec::compress(&img, p, &options(&coding))?.0
            };
            writeln!(
                out,
                "predictor {}, constraints {}, {} levels",
                container.predictor,
                if container.constraints { "on" } else { "off" },
                container.levels
            )?;
            writeln!(out, "{}", StatsReport::from_container(&container))?;
        }
        Command::Sample {
            input,
            output,
            seed,
            coding,
        } => {
            let low = io::read_image(&input)?;
            let model = load_model(&coding.weights)?;
            let p = predictor(coding.predictor, model.as_ref())?;
            // sampling keeps block sums unless told otherwise
            let constraints = coding.constraints != Constraints::Off;
            let img = codec::sample(&low, p, coding.levels, constraints, seed)?;
            io::write_image(&output, &img)?;
        }
        Command::Train {
            output,
            config,
            set,
            corpus,
            synthetic,
            held_out,
            resume,
        } => {
            let mut cfg = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let mut images = Vec::new();
            collect_images(&corpus, &mut images)?;
            images.extend(synth::natural_corpus(
                synthetic,
                64,
                64,
                cfg.seed.wrapping_mul(1_000_003),
            ));
            let init: Option<Model<f32>> = resume.map(|p| WeightStore::load(p)?.to_model()).transpose()?;
            eprintln!(
                "training on {} images, {} parameters",
                images.len(),
                Model::<f32>::zeros(cfg.model)?.parameter_count()
            );
            let model = trainer::train(&images, &cfg, init, &mut std::io::stderr())?;
            WeightStore::from_model(&model).save(&output)?;
            if held_out > 0 {
                let held = synth::natural_corpus(held_out, 64, 64, u64::MAX / 2);
                writeln!(
                    out,
                    "held-out bpsp {:.4}",
                    trainer::evaluate(&model, &held, cfg.constraints)
                )?;
            }
        }
        Command::Bench {
            sizes,
            repeat,
            seed,
            coding,
        } => {
            let model = match load_model(&coding.weights)? {
                Some(m) => Some(m),
                None if coding.predictor == Some(PredictorKind::Cnn) => Some(CnnModel::new(Model::init(
                    ModelConfig {
                        levels: coding.levels,
                        ..ModelConfig::default()
                    },
                    seed,
                )?)),
                None => None,
            };
            let p = predictor(coding.predictor, model.as_ref())?;
            writeln!(
                out,
                "{:>6} {:>12} {:>12} {:>8}",
                "size", "encode s", "decode s", "bpsp"
            )?;
            for &s in &sizes {
                let img = synth::natural_image(s, s, seed);
                let (mut enc, mut dec) = (f64::MAX, f64::MAX);
                let mut size = 0;
                for _ in 0..repeat.max(1) {
                    let t = Instant::now();
                    let (c, _) = codec::compress(&img, p, &options(&coding))?;
                    enc = enc.min(t.elapsed().as_secs_f64());
                    let t = Instant::now();
                    let back = codec::decompress(&c, model.as_ref())?;
                    dec = dec.min(t.elapsed().as_secs_f64());
                    if back != img {
                        return Err(Error::Integrity(format!("{s}x{s} did not round-trip")));
                    }
                    size = c.encoded_len();
                }
                writeln!(out, "{s:>6} {enc:>12.4} {dec:>12.4} {:>8.4}", bpsp(size, &img))?;
            }
        }
        Command::Selftest => selftest(&mut out)?,
    }
    Ok(())
}

fn selftest(out: &mut impl Write) -> Result<()> {
    let model = CnnModel::new(Model::init(
        ModelConfig {
            hidden: 8,
            res_blocks: 1,
            ..ModelConfig::default()
        },
        1,
    )?);
    let mut images = vec![Image::filled(1, 1, [9, 8, 7]), synth::random_image(5, 3, 1)];
    images.push(synth::natural_image(33, 17, 2));
    images.push(synth::natural_image(64, 64, 3));
    let mut failures = 0;
    for p in [Predictor::Uniform, Predictor::Heuristic, Predictor::Cnn(&model)] {
        for c in [Constraints::Off, Constraints::On] {
            for img in &images {
                let opts = Options {
                    levels: 3,
                    constraints: c,
                };
                let (container, _) = codec::compress(img, p, &opts)?;
                let bytes = container.to_bytes();
                let back = codec::decompress(&Container::from_bytes(&bytes)?, Some(&model))?;
                let ok = back == *img;
                failures += !ok as usize;
                writeln!(
                    out,
                    "{} {:<9} constraints {:<3} {:>3}x{:<3} {:>6} bytes",
                    if ok { "ok  " } else { "FAIL" },
                    p.kind(),
                    if c == Constraints::On { "on" } else { "off" },
                    img.width(),
                    img.height(),
                    bytes.len()
                )?;
            }
        }
    }
    if failures > 0 {
        return Err(Error::Integrity(format!("{failures} round trips failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // keep 2 for malformed files
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("srec: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
