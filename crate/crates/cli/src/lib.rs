//! Subcommands of the `heatmark` binary.
//!
//! Each command is a plain function so tests can call it directly. Commands
//! that run a network also have a `*_with` variant taking any
//! [`HeatmapPredictor`], which lets tests inject fixed heatmaps.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use heatmark_core::codec::{decode_with_values, detect_double_attention, rescale_coord};
use heatmark_core::dataset::{self, grid_layout, load_image, load_manifest, render_overlay, resize_bilinear};
use heatmark_core::trainer::{self, evaluate};
use heatmark_core::{
    write_atomic, AugmentConfig, CodecConfig, Dataset, Error, HeatmapPredictor, Metrics, ModelConfig, TrainConfig,
    UNetModel,
};

pub const LOSS_CSV: &str = "losses.csv";
pub const EVAL_CSV_HEADER: &str = "id,loss,mean_px_error,max_px_error";

#[derive(Parser, Debug)]
#[command(name = "heatmark", version, about = "Heatmap landmark detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic quadrilateral dataset.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Predict landmarks for one image.
    Infer(InferArgs),
    /// Write per-sample metrics for a manifest.
    Eval(EvalArgs),
    /// Report heatmaps with more than one strong peak.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(8..))]
    pub size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest JSON.
    #[arg(long)]
    pub data: PathBuf,
    /// Final model path. The best-validation model goes to `<out>.best`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.8, value_parser = open_unit)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Network input size; images are resized to this square.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Expected landmarks per entry; defaults to the manifest's count.
    #[arg(long)]
    pub landmarks: Option<usize>,
    /// Encoder stage widths.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    /// Cone radius in heatmap pixels.
    #[arg(long, default_value_t = 10.0)]
    pub radius: f64,
    /// Rotation augmentation is drawn from [-deg, deg].
    #[arg(long, default_value_t = 15.0)]
    pub rotation: f64,
    /// Shear augmentation is drawn from [-s, s] on each axis.
    #[arg(long, default_value_t = 0.15)]
    pub shear: f64,
    #[arg(long)]
    pub no_augment: bool,
    /// Fill the seconds column of the loss CSV.
    #[arg(long)]
    pub record_time: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out_json: PathBuf,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub radius: f64,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Minimum peak value, strictly between 0 and 1.
    #[arg(long, default_value_t = 0.5, value_parser = open_unit_f32)]
    pub threshold: f32,
    /// Minimum distance between reported peaks, in heatmap pixels.
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not strictly between 0 and 1"))
    }
}

fn open_unit_f32(s: &str) -> Result<f32, String> {
    open_unit(s).map(|v| v as f32)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Infer(a) => infer(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Diagnose(a) => diagnose(&a, out),
    }
}

/// Wrap `result` with "cannot load <what> <path>", leaving the path out when
/// the error already names it.
fn loading<T>(result: heatmark_core::Result<T>, what: &str, path: &Path) -> anyhow::Result<T> {
    result.map_err(|e| match e {
        Error::Io { .. } => anyhow::Error::new(e).context(format!("cannot load {what}")),
        e => anyhow::Error::new(e).context(format!("cannot load {what} {}", path.display())),
    })
}

pub fn load_model(path: &Path) -> anyhow::Result<UNetModel> {
    loading(UNetModel::load(path), "model", path)
}

fn load_data(path: &Path, size: usize) -> anyhow::Result<Dataset> {
    loading(load_manifest(path, size), "dataset", path)
}

/// One-line rendering of an error chain. Causes already quoted by the
/// message before them are dropped.
pub fn error_message(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.ends_with(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (ds, manifest) = dataset::synth_generate(args.count as usize, args.size as usize, args.seed, &args.out)
        .with_context(|| format!("cannot write dataset to {}", args.out.display()))?;
    writeln!(
        out,
        "wrote {} samples ({}x{}, {} landmarks, seed {}) to {}",
        ds.len(),
        args.size,
        args.size,
        ds.num_landmarks(),
        args.seed,
        manifest.display()
    )?;
    Ok(())
}

/// Path with `suffix` appended to the file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn loss_csv_path(model: &Path) -> PathBuf {
    model.parent().unwrap_or(Path::new("")).join(LOSS_CSV)
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ds = load_data(&args.data, args.size)?;
    let n = args.landmarks.unwrap_or(ds.num_landmarks());
    if let Some(bad) = ds.samples.iter().find(|s| s.landmarks.len() != n) {
        bail!("entry {}: {} landmarks, expected {}", bad.id, bad.landmarks.len(), n);
    }
    let model_config = ModelConfig {
        input_size: args.size,
        num_landmarks: n,
        encoder_channels: args.channels.clone(),
        blocks_per_stage: args.blocks,
        seed: args.seed,
    };
    let mut model = UNetModel::build(model_config)?;
    let augment = if args.no_augment {
        AugmentConfig::disabled()
    } else {
        AugmentConfig {
            rotation_range_deg: (-args.rotation, args.rotation),
            shear_range: (-args.shear, args.shear),
        }
    };
    let config = TrainConfig {
        batch_size: args.batch as usize,
        learning_rate: args.lr,
        epochs: args.epochs,
        split_ratio: args.split,
        seed: args.seed,
        augment,
        codec: CodecConfig::new(args.radius, model.config().output_size())?,
        record_time: args.record_time,
    };
    config.validate()?;
    // From the grid centre the farthest pixel is (G - 1) / sqrt(2) away; a
    // larger cone leaves some landmark without any background.
    let g = config.codec.grid_size as f64;
    if config.codec.radius > (g - 1.0) / std::f64::consts::SQRT_2 {
        bail!(
            "radius {} covers the whole {}x{} heatmap grid; use a smaller --radius or a larger --size",
            config.codec.radius,
            config.codec.grid_size,
            config.codec.grid_size
        );
    }
    writeln!(
        out,
        "config: epochs {} batch {} lr {} split {} seed {} size {} grid {} landmarks {} channels {:?} blocks {} radius {} rotation {} shear {} params {}",
        config.epochs,
        config.batch_size,
        config.learning_rate,
        config.split_ratio,
        config.seed,
        args.size,
        config.codec.grid_size,
        n,
        args.channels,
        args.blocks,
        config.codec.radius,
        config.augment.rotation_range_deg.1,
        config.augment.shear_range.1,
        model.parameter_count(),
    )?;

    let csv_path = loss_csv_path(&args.out);
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut csv = std::fs::File::create(&csv_path).with_context(|| format!("cannot create {}", csv_path.display()))?;
    writeln!(csv, "{}", trainer::EpochRecord::CSV_HEADER)?;
    let total = config.epochs;
    let outcome = trainer::train(&mut model, &ds, &config, &mut |r| {
        let line = r.csv_row();
        writeln!(csv, "{line}").and_then(|_| csv.flush()).map_err(|e| Error::Io {
            path: csv_path.clone(),
            source: e,
        })?;
        let _ = writeln!(
            out,
            "epoch {}/{} train {:.6} val {:.6}",
            r.epoch, total, r.train_loss, r.val_loss
        );
        Ok(())
    })?;
    csv.sync_all()?;

    model.save(&args.out)?;
    let best_path = with_suffix(&args.out, ".best");
    match &outcome.best {
        Some((_, best)) => best.save(&best_path)?,
        None => model.save(&best_path)?,
    }
    match (outcome.history.records.last(), &outcome.best) {
        (Some(last), Some((epoch, _))) => writeln!(
            out,
            "final train_loss {:.6} val_loss {:.6} (best val at epoch {epoch})",
            last.train_loss, last.val_loss
        )?,
        _ => writeln!(out, "no epochs run; saved the initial model")?,
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferReport {
    /// Decoded positions on the heatmap grid.
    pub landmarks: Vec<[i64; 2]>,
    pub grid_size: usize,
    pub peak_values: Vec<f32>,
    /// The same positions scaled to the original image.
    pub image_landmarks: Vec<[i64; 2]>,
    /// Original image `[width, height]`.
    pub image_size: [usize; 2],
}

/// Run `predictor` on the image at `path` resized to `input_size`.
/// Returns the report and the resized image with its heatmaps.
pub fn infer_with(
    predictor: &dyn HeatmapPredictor,
    input_size: usize,
    path: &Path,
) -> anyhow::Result<(InferReport, heatmark_core::Tensor, heatmark_core::HeatmapStack)> {
    let raw = load_image(path)?;
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let image = resize_bilinear(&raw, input_size, input_size)?;
    let stack = predictor
        .predict(&[&image])?
        .pop()
        .context("predictor returned no heatmaps")?;
    let grid = stack.grid_size();
    let (points, values) = decode_with_values(&stack);
    let report = InferReport {
        landmarks: points.points().iter().map(|p| [p.x, p.y]).collect(),
        grid_size: grid,
        peak_values: values,
        image_landmarks: points
            .points()
            .iter()
            .map(|p| [rescale_coord(p.x, grid, w), rescale_coord(p.y, grid, h)])
            .collect(),
        image_size: [w, h],
    };
    Ok((report, image, stack))
}

fn json_bytes<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn infer(args: &InferArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let (report, image, stack) = infer_with(&model, model.config().input_size, &args.image)?;
    write_atomic(&args.out_json, &json_bytes(&report)?)?;
    if let Some(path) = &args.overlay {
        render_overlay(&image, &stack, grid_layout(stack.len()), path)?;
    }
    writeln!(out, "{} landmarks written to {}", report.landmarks.len(), args.out_json.display())?;
    Ok(())
}

/// Per-sample metrics CSV with a trailing `mean` row.
pub fn eval_csv(metrics: &Metrics) -> String {
    let mut s = format!("{EVAL_CSV_HEADER}\n");
    for m in &metrics.samples {
        s += &format!("{},{:.8},{:.8},{:.8}\n", m.id, m.loss, m.mean_pixel_error, m.max_pixel_error);
    }
    let k = metrics.samples.len() as f64;
    let mean = |f: fn(&trainer::SampleMetrics) -> f64| metrics.samples.iter().map(f).sum::<f64>() / k;
    s += &format!(
        "mean,{:.8},{:.8},{:.8}\n",
        mean(|m| m.loss),
        mean(|m| m.mean_pixel_error),
        mean(|m| m.max_pixel_error)
    );
    s
}

pub fn eval_with(predictor: &dyn HeatmapPredictor, ds: &Dataset, codec: &CodecConfig) -> anyhow::Result<Metrics> {
    if ds.is_empty() {
        bail!("dataset is empty");
    }
    Ok(evaluate(predictor, ds, codec)?)
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let ds = load_data(&args.data, model.config().input_size)?;
    let codec = CodecConfig::new(args.radius, model.config().output_size())?;
    let metrics = eval_with(&model, &ds, &codec)?;
    write_atomic(&args.out, eval_csv(&metrics).as_bytes())?;
    writeln!(
        out,
        "{} samples: mean loss {:.6}, mean px error {:.4}, within 2px {:.4}, double attention rate {:.4}",
        ds.len(),
        metrics.mean_loss,
        metrics.mean_pixel_error,
        metrics.within_2px,
        metrics.double_attention_rate
    )?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub id: String,
    pub landmark: usize,
    pub peaks: Vec<[i64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnoseReport {
    pub findings: Vec<Finding>,
    pub heatmaps: usize,
}

impl DiagnoseReport {
    pub fn rate(&self) -> f64 {
        self.findings.len() as f64 / self.heatmaps.max(1) as f64
    }

    pub fn render(&self) -> String {
        let mut s = String::from("id,landmark,peak_count,peaks\n");
        for f in &self.findings {
            let coords: Vec<String> = f.peaks.iter().map(|[x, y]| format!("({x} {y})")).collect();
            s += &format!("{},{},{},{}\n", f.id, f.landmark, f.peaks.len(), coords.join(" "));
        }
        s += &format!(
            "double attention rate {:.6} ({} of {} heatmaps)\n",
            self.rate(),
            self.findings.len(),
            self.heatmaps
        );
        s
    }
}

pub fn diagnose_with(
    predictor: &dyn HeatmapPredictor,
    ds: &Dataset,
    threshold: f32,
    separation: f64,
) -> anyhow::Result<DiagnoseReport> {
    let mut report = DiagnoseReport {
        findings: Vec::new(),
        heatmaps: 0,
    };
    for chunk in ds.samples.chunks(8) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        for (sample, stack) in chunk.iter().zip(predictor.predict(&images)?) {
            for i in 0..stack.len() {
                report.heatmaps += 1;
                let peaks = detect_double_attention(stack.map(i), stack.grid_size(), threshold, separation);
                if peaks.len() >= 2 {
                    report.findings.push(Finding {
                        id: sample.id.clone(),
                        landmark: i,
                        peaks: peaks.iter().map(|p| [p.x, p.y]).collect(),
                    });
                }
            }
        }
    }
    Ok(report)
}

pub fn diagnose(args: &DiagnoseArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let ds = load_data(&args.data, model.config().input_size)?;
    let text = diagnose_with(&model, &ds, args.threshold, args.separation)?.render();
    if let Some(path) = &args.out {
        write_atomic(path, text.as_bytes())?;
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}
