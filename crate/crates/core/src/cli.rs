//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::autograd::GraphError;
use crate::config::{parse_pairs, ConfigError, Precision, RunConfig};
use crate::evaluation::{
    clip_unit, denoise_image, evaluate_dataset, image_rng, load_image, load_image_dir, psnr, save_image, EvalError,
    EvalOptions, ImageBuffer, ImageError,
};
use crate::lattice::{analyze, count_parameters, matched_plain, ArchSpec, Fusion, LatticeSpec, PlainSpec, TopologyError};
use crate::model::{initialize_model, NetworkModel};
use crate::synthetic::texture_set;
use crate::tensor::{Scalar, Tensor};
use crate::training::{
    load_model, make_training_pair, save_model, train, NoiseMode, PersistError, TrainError, TrainHistory, Validation,
};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_MODEL_FILE: i32 = 5;
pub const EXIT_NON_FINITE: i32 = 6;
pub const EXIT_INCOMPATIBLE: i32 = 7;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    ModelFile(#[from] PersistError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Topology(_) => EXIT_USAGE,
            CliError::Config(_) | CliError::Train(TrainError::Config(_)) => EXIT_CONFIG,
            CliError::Data(_) | CliError::Image(_) | CliError::Train(TrainError::Patch(_)) => EXIT_DATA,
            CliError::Eval(EvalError::EmptyDataset) => EXIT_DATA,
            CliError::ModelFile(_) => EXIT_MODEL_FILE,
            CliError::Train(TrainError::NonFiniteLoss { .. }) => EXIT_NON_FINITE,
            CliError::Graph(_) | CliError::Train(_) | CliError::Eval(_) => EXIT_INCOMPATIBLE,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "lfnet", version, about = "Lattice fusion network image denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Structural report for a lattice (or plain chain): depths, distances,
    /// degrees, parameters and receptive field.
    Analyze(AnalyzeArgs),
    /// Train a lattice network on a directory of clean images.
    Train(TrainArgs),
    /// Denoise one image.
    Denoise(DenoiseArgs),
    /// Score a model on a directory of clean images at a fixed noise level.
    Eval(EvalArgs),
    /// Train a lattice and its parameter-matched plain chain side by side.
    Compare(CompareArgs),
    /// Write procedural texture images.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value = "concat")]
    fusion: Fusion,
    #[arg(long, default_value_t = 32)]
    filters: usize,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    /// Analyze a plain chain with this many conv layers instead of a lattice.
    #[arg(long, conflicts_with_all = ["rows", "cols", "fusion"])]
    plain_layers: Option<usize>,
    #[arg(long, default_value_t = 0, requires = "plain_layers")]
    wide_prefix: usize,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Also print the edge list.
    #[arg(long)]
    graph: bool,
}

/// Every configuration key as a flag; these override the config file.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the file and flags.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    rows: Option<String>,
    #[arg(long)]
    cols: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    filters: Option<String>,
    #[arg(long)]
    kernel_size: Option<String>,
    /// Training noise: a sigma such as `25` or a blind range such as `0-55`.
    #[arg(long, alias = "sigma")]
    noise: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    #[arg(long)]
    pairs_per_epoch: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr_start: Option<String>,
    #[arg(long)]
    lr_end: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    train_dir: Option<String>,
    #[arg(long)]
    val_dir: Option<String>,
    #[arg(long)]
    val_sigma: Option<String>,
    #[arg(long)]
    val_seed: Option<String>,
    /// Output model file.
    #[arg(long)]
    model: Option<String>,
    /// Output history CSV.
    #[arg(long)]
    history: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    /// Sequential execution; this is the only mode.
    #[arg(long)]
    deterministic: bool,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let fields: [(&str, &Option<String>); 22] = [
            ("rows", &self.rows),
            ("cols", &self.cols),
            ("channels", &self.channels),
            ("fusion", &self.fusion),
            ("filters", &self.filters),
            ("kernel_size", &self.kernel_size),
            ("noise", &self.noise),
            ("patch_size", &self.patch_size),
            ("pairs_per_epoch", &self.pairs_per_epoch),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("lr_start", &self.lr_start),
            ("lr_end", &self.lr_end),
            ("seed", &self.seed),
            ("augment", &self.augment),
            ("train_dir", &self.train_dir),
            ("val_dir", &self.val_dir),
            ("val_sigma", &self.val_sigma),
            ("val_seed", &self.val_seed),
            ("model", &self.model),
            ("history", &self.history),
            ("precision", &self.precision),
        ];
        let mut out: Vec<(String, String)> = fields
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        if self.deterministic {
            out.push(("deterministic".into(), "true".into()));
        }
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file_pairs = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
                parse_pairs(&text)?.into_iter().map(|(_, k, v)| (k, v)).collect()
            }
            None => Vec::new(),
        };
        Ok(RunConfig::resolve(self.profile.as_deref(), &file_pairs, &self.overrides())?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Treat the input as clean, add noise at this level first and report
    /// PSNR against it.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of clean P5/P6 images.
    #[arg(long)]
    data: PathBuf,
    /// Test noise level (required).
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-image CSV here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Round denoised images to 8 bits before scoring.
    #[arg(long)]
    quantize: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output CSV with columns `epoch,lfnet_psnr,plain_psnr`.
    #[arg(long, default_value = "compare.csv")]
    out: PathBuf,
    /// Train the lattice for both columns (sanity control).
    #[arg(long)]
    control: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip this many images of the sequence first (for disjoint held-out sets).
    #[arg(long, default_value_t = 0)]
    skip: usize,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Denoise(a) => cmd_denoise(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let arch = match a.plain_layers {
        Some(layers) => ArchSpec::Plain(PlainSpec {
            layers,
            wide_prefix: a.wide_prefix,
            filters: a.filters,
            kernel_size: a.kernel_size,
            in_channels: a.channels,
            out_channels: a.channels,
            ..PlainSpec::new(layers, a.wide_prefix, a.channels)
        }),
        None => {
            let (Some(rows), Some(cols)) = (a.rows, a.cols) else {
                return Err(CliError::Usage("analyze needs --rows and --cols (or --plain-layers)".into()));
            };
            ArchSpec::Lattice(LatticeSpec {
                filters: a.filters,
                kernel_size: a.kernel_size,
                fusion: a.fusion,
                ..LatticeSpec::new(rows, cols, a.channels)
            })
        }
    };
    let report = analyze(&arch)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    } else {
        println!("architecture            {}", report.arch);
        println!("conv layers             {}", report.conv_layers);
        println!("depth (with output)     min {}  max {}", report.min_depth, report.max_depth);
        println!(
            "depth (without output)  min {}  max {}",
            report.min_depth_without_output, report.max_depth_without_output
        );
        println!("max in/out degree       {} / {}", report.max_in_degree, report.max_out_degree);
        println!("receptive field         {}x{}", report.receptive_field, report.receptive_field);
        println!("parameters              {}", group(report.parameters.total));
        println!();
        println!("distance to output (layers, counting the node):");
        for d in &report.distances {
            println!("  {:<8} {}", d.node, d.distance);
        }
        println!();
        println!("parameter breakdown:");
        for p in &report.parameters.per_node {
            println!("  {:<8} {:>3} -> {:<3} {:>9}", p.node, p.in_channels, p.out_channels, group(p.params));
        }
    }
    if a.graph {
        print!("{}", arch.build()?.export_graph());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} directory {} does not exist", path.display())))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display()))),
        _ => Ok(()),
    }
}

/// Load every image in `dir` as a tensor, requiring `channels` channels.
fn load_dataset<T: Scalar>(dir: &Path, channels: usize) -> Result<Vec<(String, Tensor<T>)>> {
    let images = load_image_dir(dir)?;
    if images.is_empty() {
        return Err(CliError::Data(format!("no .pgm/.ppm images in {}", dir.display())));
    }
    images
        .into_iter()
        .map(|(name, img)| {
            if img.channels != channels {
                return Err(CliError::Data(format!(
                    "{}: image has {} channel(s), the network expects {channels}",
                    dir.join(&name).display(),
                    img.channels
                )));
            }
            Ok((name, img.to_tensor()))
        })
        .collect()
}

struct Prepared<T> {
    train: Vec<Tensor<T>>,
    val: Option<(Vec<(String, Tensor<T>)>, NoiseMode)>,
}

fn prepare<T: Scalar>(cfg: &RunConfig) -> Result<Prepared<T>> {
    let dir = cfg
        .train_dir
        .as_ref()
        .ok_or_else(|| CliError::Config(ConfigError::Invalid("train_dir is required".into())))?;
    require_dir(dir, "training image")?;
    let channels = cfg.lattice.in_channels;
    let val = match &cfg.val_dir {
        Some(v) => {
            require_dir(v, "validation image")?;
            let noise = cfg.validation_noise()?;
            Some((load_dataset::<T>(v, channels)?, noise))
        }
        None => None,
    };
    let named = load_dataset::<T>(dir, channels)?;
    let too_small = named
        .iter()
        .find(|(_, t)| t.shape().h < cfg.train.patch_size || t.shape().w < cfg.train.patch_size);
    if let Some((name, t)) = too_small {
        return Err(CliError::Data(format!(
            "{}: image is {}x{}, smaller than the {}-pixel patch",
            dir.join(name).display(),
            t.shape().h,
            t.shape().w,
            cfg.train.patch_size
        )));
    }
    Ok(Prepared {
        train: named.into_iter().map(|(_, t)| t).collect(),
        val,
    })
}

fn train_one<T: Scalar>(arch: &ArchSpec, cfg: &RunConfig, data: &Prepared<T>, label: &str) -> Result<(NetworkModel<T>, TrainHistory)> {
    let mut model: NetworkModel<T> = initialize_model(arch, cfg.train.seed)?;
    let validation = data.val.as_ref().map(|(images, noise)| Validation {
        images,
        noise: *noise,
        seed: cfg.val_seed,
    });
    let epochs = cfg.train.epochs;
    let history = train(&mut model, &data.train, &cfg.train, validation.as_ref(), |r| {
        let val = r.val_psnr_db.map(|p| format!("  val {p:.3} dB")).unwrap_or_default();
        eprintln!("{label}epoch {}/{epochs}  loss {:.6e}  lr {:.3e}{val}", r.epoch, r.mean_loss, r.lr);
    })?;
    Ok((model, history))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn run_train<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let data = prepare::<T>(cfg)?;
    ensure_parent(&cfg.model)?;
    let arch = cfg.arch();
    arch.build()?;
    let (model, history) = train_one(&arch, cfg, &data, "")?;
    save_model(&model, &cfg.model)?;
    let hist = cfg.history_path();
    write_text(&hist, &history.to_csv())?;
    eprintln!("wrote {} and {}", cfg.model.display(), hist.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg),
        Precision::F64 => run_train::<f64>(&cfg),
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn cmd_denoise(a: &DenoiseArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let image = load_image(&a.input)?;
    let want = model.arch().in_channels();
    if image.channels != want {
        return Err(GraphError::InputChannels {
            expected: want,
            actual: image.channels,
        }
        .into());
    }
    let clean: Tensor<f32> = image.to_tensor();
    let noisy = match a.sigma {
        Some(s) => {
            NoiseMode::Fixed(s).validate().map_err(CliError::Usage)?;
            make_training_pair(&clean, NoiseMode::Fixed(s), &mut image_rng(a.seed, 0)).0
        }
        None => clean.clone(),
    };
    let denoised = denoise_image(&model, &noisy)?;
    ensure_parent(&a.output)?;
    save_image(&ImageBuffer::from_tensor(&denoised)?, &a.output)?;
    if a.sigma.is_some() {
        let p_noisy = psnr(&clip_unit(&noisy), &clean, 1.0).expect("same shape");
        let p_out = psnr(&denoised, &clean, 1.0).expect("same shape");
        println!("noisy_psnr_db={}", fmt_db(p_noisy));
        println!("psnr_db={}", fmt_db(p_out));
    }
    eprintln!("wrote {}", a.output.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let Some(sigma) = a.sigma else {
        return Err(CliError::Usage(
            "evaluation needs an explicit test noise level: pass --sigma".into(),
        ));
    };
    let noise = NoiseMode::Fixed(sigma);
    noise.validate().map_err(CliError::Usage)?;
    let model = load_model(&a.model)?;
    require_dir(&a.data, "dataset")?;
    let images = load_dataset::<f32>(&a.data, model.arch().in_channels())?;
    let report = evaluate_dataset(&model, &images, noise, a.seed, EvalOptions { quantize: a.quantize })?;
    if let Some(path) = &a.report {
        write_text(path, &report.to_csv())?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    } else {
        print!("{}", report.to_table());
        println!("mean PSNR {} dB  mean SSIM {:.4}", fmt_db(report.mean_psnr_db), report.mean_ssim);
    }
    Ok(())
}

fn run_compare<T: Scalar>(cfg: &RunConfig, out: &Path, control: bool) -> Result<()> {
    let data = prepare::<T>(cfg)?;
    if data.val.is_none() {
        return Err(CliError::Config(ConfigError::Invalid("compare needs val_dir".into())));
    }
    let lattice = cfg.arch();
    let lattice_params = count_parameters(&lattice.build()?).total;
    let other = if control {
        lattice
    } else {
        ArchSpec::Plain(matched_plain(&cfg.lattice)?)
    };
    let other_params = count_parameters(&other.build()?).total;
    println!("lfnet {lattice}: {} parameters", group(lattice_params));
    let diff = (other_params as f64 / lattice_params as f64 - 1.0) * 100.0;
    match other {
        ArchSpec::Plain(p) => println!(
            "plain {other}: {} parameters ({} layers, wide prefix {} auto-selected, {diff:+.1}%)",
            group(other_params),
            p.layers,
            p.wide_prefix
        ),
        ArchSpec::Lattice(_) => println!("control {other}: {} parameters", group(other_params)),
    }
    let (_, h1) = train_one(&lattice, cfg, &data, "[lfnet] ")?;
    let (_, h2) = train_one(&other, cfg, &data, "[plain] ")?;
    let mut csv = String::from("epoch,lfnet_psnr,plain_psnr\n");
    for (a, b) in h1.records.iter().zip(&h2.records) {
        let p = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", a.epoch, p(a.val_psnr_db), p(b.val_psnr_db)));
    }
    write_text(out, &csv)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    match cfg.precision {
        Precision::F32 => run_compare::<f32>(&cfg, &a.out, a.control),
        Precision::F64 => run_compare::<f64>(&cfg, &a.out, a.control),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.channels != 1 && a.channels != 3 {
        return Err(CliError::Usage(format!("--channels must be 1 or 3, got {}", a.channels)));
    }
    if a.height == 0 || a.width == 0 {
        return Err(CliError::Usage("image size must be positive".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", a.out.display())))?;
    let ext = if a.channels == 1 { "pgm" } else { "ppm" };
    let images = texture_set(a.skip + a.count, a.height, a.width, a.channels, a.seed);
    for (i, img) in images.iter().enumerate().skip(a.skip) {
        save_image(img, a.out.join(format!("texture_{i:04}.{ext}")))?;
    }
    eprintln!("wrote {} images to {}", a.count, a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_grouping() {
        assert_eq!(group(288_481), "288,481");
        assert_eq!(group(1_000), "1,000");
        assert_eq!(group(999), "999");
        assert_eq!(group(614_691), "614,691");
    }

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::try_parse_from(["lfnet", "train", "--rows", "3", "--sigma", "15", "--deterministic"]).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        let o = t.flags.overrides();
        assert!(o.contains(&("rows".into(), "3".into())));
        assert!(o.contains(&("noise".into(), "15".into())));
        assert!(o.contains(&("deterministic".into(), "true".into())));
    }
}
