use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use semquant::codec::{decode_packet, encode_packet, payload, Coder, PacketMeta, WirePacket};
use semquant::datagen::make_dataset;
use semquant::harness::{self, ExperimentConfig, Report, SWEEP_RATIOS};
use semquant::task::pretrain_segmenter;
use semquant::trainer::{evaluate, CodecModel};
use semquant::{Error, FrozenSegmenter, LabeledScene, Precision, Real, Result, Scheme, Tensor, TrainConfig};

#[derive(Parser)]
#[command(name = "semquant", version, about = "Task-driven semantic quantization: train, evaluate and transmit")]
struct Cli {
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["single", "double"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured train/val scenes under `<out-dir>/data`.
    GenData {
        /// Also write a PPM preview of every image.
        #[arg(long)]
        ppm: bool,
    },
    /// Pre-train and freeze the segmenter; writes `teacher.gosw`.
    PretrainTask,
    /// Train and evaluate the configured schemes, ratios and seeds.
    Train {
        #[arg(long, value_delimiter = ',')]
        scheme: Vec<Scheme>,
        #[arg(long, value_delimiter = ',')]
        ratio: Vec<usize>,
        /// Reuse a saved segmenter instead of pre-training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a codec checkpoint on the validation split.
    Eval {
        checkpoint: PathBuf,
        /// Defaults to `<out-dir>/teacher.gosw`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Configured schemes across compression ratios.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_RATIOS)]
        ratios: Vec<usize>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// The six-objective ablation and the JSD/perceptual curve correlation.
    Ablate {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Image (PPM or GOSS scene) to wire packet.
    Encode {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "huffman")]
        coder: Coder,
    },
    /// Wire packet to PPM image.
    Decode {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Print a packet's header and payload accounting.
    InspectPacket {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Print the table of a finished run.
    Report {
        /// Directory holding `report.json`; defaults to the output directory.
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(("seed", s.to_string()));
    }
    if let Some(d) = &cli.out_dir {
        overrides.push(("out_dir", d.display().to_string()));
    }
    if let Some(p) = &cli.precision {
        overrides.push(("precision", p.clone()));
    }
    ExperimentConfig::parse_with(&text, &overrides)
}

fn image_err(e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

fn write_ppm(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let (h, w, _) = img.dims3()?;
    let rgb: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let file = fs::File::create(path)?;
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&rgb, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(image_err)
}

fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"GOSS") {
        return Ok(LabeledScene::read_raw(&bytes[..])?.image_tensor());
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm).map_err(image_err)?.to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new(vec![h as usize, w as usize, 3], img.into_raw().iter().map(|&b| b as f64 / 255.0).collect())
}

/// Training config stored next to a checkpoint (`x.gosw` → `x.json`).
fn sidecar(checkpoint: &Path) -> Result<TrainConfig> {
    let path = checkpoint.with_extension("json");
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_model<T: Real>(checkpoint: &Path) -> Result<(TrainConfig, CodecModel<T>)> {
    let cfg = sidecar(checkpoint)?;
    let model = CodecModel::from_checkpoint(cfg.codec_config(), cfg.k, &fs::read(checkpoint)?)?;
    Ok((cfg, model))
}

fn with_teacher(mut cfg: ExperimentConfig, teacher: &Option<PathBuf>) -> ExperimentConfig {
    if teacher.is_some() {
        cfg.teacher_checkpoint.clone_from(teacher);
    }
    cfg
}

fn gen_data(cfg: &ExperimentConfig, ppm: bool) -> Result<()> {
    let (train, val) = make_dataset(&cfg.dataset)?;
    for (split, scenes) in [("train", &train), ("val", &val)] {
        let dir = cfg.out_dir.join("data").join(split);
        fs::create_dir_all(&dir)?;
        for (i, s) in scenes.iter().enumerate() {
            s.write_raw(fs::File::create(dir.join(format!("{i:04}.goss")))?)?;
            if ppm {
                write_ppm(&dir.join(format!("{i:04}.ppm")), &s.image_tensor())?;
            }
        }
    }
    println!("wrote {} train and {} val scenes to {}", train.len(), val.len(), cfg.out_dir.join("data").display());
    Ok(())
}

fn pretrain_task<T: Real>(cfg: &ExperimentConfig) -> Result<()> {
    let (train, val) = make_dataset(&cfg.dataset)?;
    let f = pretrain_segmenter::<T>(&train, &val, cfg.dataset.classes, &cfg.teacher)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("teacher.gosw");
    fs::write(&path, f.checkpoint())?;
    let m = f.validation().expect("pre-training records validation metrics");
    println!("segmenter {} → {}", f.digest(), path.display());
    println!("validation mIoU {:.3}  accuracy {:.3}", m.miou, m.accuracy);
    Ok(())
}

fn eval<T: Real>(cfg: &ExperimentConfig, checkpoint: &Path, teacher: &Option<PathBuf>) -> Result<()> {
    let (_, model) = load_model::<T>(checkpoint)?;
    let teacher = teacher.clone().or_else(|| cfg.teacher_checkpoint.clone()).unwrap_or_else(|| cfg.out_dir.join("teacher.gosw"));
    let seg = FrozenSegmenter::<T>::from_checkpoint(&fs::read(&teacher)?, cfg.dataset.classes)?;
    let (_, val) = make_dataset(&cfg.dataset)?;
    let ext = semquant::nets::build_feature_extractor::<T>();
    let e = evaluate(&model, &val, &seg, cfg.wants("perceptual").then_some(&ext))?;
    println!("{}", serde_json::to_string_pretty(&e).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

fn encode<T: Real>(checkpoint: &Path, input: &Path, output: &Path, coder: Coder) -> Result<()> {
    let (cfg, model) = load_model::<T>(checkpoint)?;
    let img = read_image(input)?;
    let (h, w, _) = img.dims3()?;
    let idx = model.indices(&img.cast())?;
    let meta = PacketMeta::new(h, w, cfg.ratio, cfg.k)?;
    let packet = encode_packet(&idx, meta, coder)?;
    let bytes = packet.to_bytes();
    fs::write(output, &bytes)?;
    println!("{} symbols → {} bytes ({:?})", packet.symbol_count, bytes.len(), coder);
    Ok(())
}

fn decode<T: Real>(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let (cfg, model) = load_model::<T>(checkpoint)?;
    let (idx, meta) = decode_packet(&fs::read(input)?)?;
    if meta.k as usize != cfg.k || meta.ratio as usize != cfg.ratio {
        return Err(Error::Config(format!(
            "packet has r={} K={}, checkpoint expects r={} K={}",
            meta.ratio, meta.k, cfg.ratio, cfg.k
        )));
    }
    write_ppm(output, &model.decode_indices(&idx)?.cast())?;
    println!("{}x{} image → {}", meta.height, meta.width, output.display());
    Ok(())
}

fn inspect(input: &Path, json: bool) -> Result<()> {
    let bytes = fs::read(input)?;
    let p = WirePacket::parse(&bytes)?;
    decode_packet(&bytes)?;
    let pay = payload(&p);
    if json {
        let v = serde_json::json!({
            "height": p.meta.height,
            "width": p.meta.width,
            "ratio": p.meta.ratio,
            "k": p.meta.k,
            "coder": p.coder.id(),
            "symbol_count": p.symbol_count,
            "header_bytes": pay.header_bytes,
            "body_bytes": pay.body_bytes,
            "total_bytes": pay.total_bytes,
        });
        println!("{v:#}");
    } else {
        println!("image     {}x{}", p.meta.height, p.meta.width);
        println!("ratio     {}", p.meta.ratio);
        println!("codebook  {}", p.meta.k);
        println!("coder     {:?}", p.coder);
        println!("symbols   {}", p.symbol_count);
        println!("header    {} B", pay.header_bytes);
        println!("body      {} B", pay.body_bytes);
        println!("total     {} B ({:.3} KiB)", pay.total_bytes, pay.kib);
    }
    Ok(())
}

fn print_report(report: &Report, out_dir: &Path) {
    print!("{}", report.render_table());
    if let Some(c) = &report.correlation {
        println!("jsd/perceptual curve correlation ({}): {:.4}", c.scheme, c.mean);
    }
    println!("reports in {}", out_dir.display());
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let double = cfg.precision == Precision::Double;
    macro_rules! typed {
        ($f:ident($($a:expr),*)) => {
            if double { $f::<f64>($($a),*) } else { $f::<f32>($($a),*) }
        };
    }
    match &cli.command {
        Command::GenData { ppm } => gen_data(&cfg, *ppm),
        Command::PretrainTask => typed!(pretrain_task(&cfg)),
        Command::Train { scheme, ratio, teacher } => {
            let mut cfg = with_teacher(cfg, teacher);
            if !scheme.is_empty() {
                cfg.schemes.clone_from(scheme);
            }
            if !ratio.is_empty() {
                cfg.ratios.clone_from(ratio);
            }
            let report = harness::run_experiment(&cfg)?;
            print_report(&report, &cfg.out_dir);
            Ok(())
        }
        Command::Eval { checkpoint, teacher } => typed!(eval(&cfg, checkpoint, teacher)),
        Command::Sweep { ratios, teacher } => {
            let cfg = with_teacher(cfg, teacher);
            let report = harness::sweep_r(&cfg, ratios)?;
            print_report(&report, &cfg.out_dir);
            Ok(())
        }
        Command::Ablate { teacher } => {
            let cfg = with_teacher(cfg, teacher);
            let report = harness::ablation_suite(&cfg)?;
            print_report(&report, &cfg.out_dir);
            Ok(())
        }
        Command::Encode { checkpoint, input, output, coder } => typed!(encode(checkpoint, input, output, *coder)),
        Command::Decode { checkpoint, input, output } => typed!(decode(checkpoint, input, output)),
        Command::InspectPacket { input, json } => inspect(input, *json),
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or(cfg.out_dir);
            let report = Report::read_json(&dir.join("report.json"))?;
            print!("{}", report.render_table());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Format(_) | Error::Packet(_) | Error::Transmission(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
