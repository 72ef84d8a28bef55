//! Command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
//! (divergence or a failed gradient check).
//!
//! Any subcommand accepts `--config FILE` holding flat `key = value` lines,
//! one per flag of that subcommand (`#` starts a comment). File values are
//! applied first, so flags on the command line override them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::checkpoint::load_checkpoint;
use crate::data::{
    augment_all, list_images, load_corpus, save_corpus, synthesize_rain, synthetic_corpus,
    ImagePair, RainParams,
};
use crate::error::{Error, Result};
use crate::gradcheck::{suite, SuiteConfig};
use crate::image_io::{read_image, write_image, ImageKind};
use crate::loss::TextureLossConfig;
use crate::metrics::{evaluate_corpus, evaluate_dirs, Evaluation};
use crate::net::{restore_image, ModelConfig};
use crate::train::{append_log, infer, TrainConfig, Trainer};
use crate::weighting::Strategy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "menet", version, about = "Multi-task single-image de-raining")]
pub struct Cli {
    /// File of `key = value` lines supplying defaults for the subcommand's flags
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a paired rainy/clean corpus (rain/ and norain/ subdirectories)
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train a model on a paired corpus
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Remove rain from one image or every image in a directory
    #[command(args_override_self = true)]
    Derain(DerainArgs),
    /// Per-image PSNR and SSIM of restored images against ground truth, as CSV
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every operation, loss and the network
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the eight loss/weighting/attention combinations
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RainPreset {
    Light,
    Moderate,
    Heavy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Png,
    Ppm,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Png => "png",
            Format::Ppm => "ppm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Fixed,
    Gb,
    Lb,
}

impl From<WeightingArg> for Strategy {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Fixed => Strategy::Fixed,
            WeightingArg::Gb => Strategy::GradientBalanced,
            WeightingArg::Lb => Strategy::LossBalanced,
        }
    }
}

/// `p,e,t` weight triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightTriple(pub [f64; 3]);

impl FromStr for WeightTriple {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!(
                "expected three comma-separated weights p,e,t, got `{s}`"
            ));
        }
        let mut w = [0.0; 3];
        for (slot, p) in w.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
        }
        Ok(WeightTriple(w))
    }
}

fn parse_blocks(s: &str) -> std::result::Result<usize, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("`{s}` is not a supported depth (expected 8 or 16)")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output corpus root
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Take clean images from this directory instead of generating them
    #[arg(long, value_name = "DIR")]
    pub clean: Option<PathBuf>,
    /// Number of procedural images
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Side length of procedural images
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Rain preset
    #[arg(long, value_enum, default_value_t = RainPreset::Light)]
    pub rain: RainPreset,
    /// Override the preset's fraction of streak-seeding pixels
    #[arg(long)]
    pub density: Option<f64>,
    /// Override the preset's streak length in pixels
    #[arg(long)]
    pub length: Option<f64>,
    /// Override the preset's streak angle in degrees from vertical
    #[arg(long, allow_hyphen_values = true)]
    pub angle: Option<f64>,
    /// Override the preset's peak streak brightness
    #[arg(long)]
    pub intensity: Option<f64>,
    /// Image format of the written files
    #[arg(long, value_enum, default_value_t = Format::Png)]
    pub format: Format,
    /// Seed for the scenes and the rain
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Residual blocks in the trunk: 8 or 16
    #[arg(long, default_value = "8", value_parser = parse_blocks)]
    pub blocks: usize,
    /// Channel attention in the residual blocks
    #[arg(long, value_enum, default_value_t = Switch::On, num_args = 0..=1, default_missing_value = "on")]
    pub ca: Switch,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus root with rain/ and norain/ subdirectories
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint written after every epoch
    #[arg(long, value_name = "FILE", default_value = "menet.ckpt")]
    pub checkpoint: PathBuf,
    /// Per-step CSV log; replaced on a fresh run, appended to on resume
    #[arg(long, value_name = "FILE", default_value = "train_log.csv")]
    pub log: PathBuf,
    /// Continue from this checkpoint
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Edge-aware loss
    #[arg(long, value_enum, default_value_t = Switch::On, num_args = 0..=1, default_missing_value = "on")]
    pub loss_e: Switch,
    /// Texture matching loss
    #[arg(long, value_enum, default_value_t = Switch::On, num_args = 0..=1, default_missing_value = "on")]
    pub loss_t: Switch,
    /// Task weighting
    #[arg(long, value_enum, default_value_t = WeightingArg::Gb)]
    pub weighting: WeightingArg,
    /// Weights p,e,t used with `--weighting fixed`
    #[arg(long, default_value = "1,0.01,0.01")]
    pub fixed_w: WeightTriple,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Desk scale: batch 4 and crop 32 unless given explicitly
    #[arg(long)]
    pub desk: bool,
    /// Batch size [default: 16, or 4 with --desk]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Side of the augmentation crops, a multiple of 4 [default: 64, or 32 with --desk].
    /// Images already of this size are used as they are.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Passes over the training patches
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// First epoch at the reduced learning rate
    #[arg(long, default_value_t = 40)]
    pub lr_drop_epoch: usize,
    /// Divisor applied to the learning rate from --lr-drop-epoch on
    #[arg(long, default_value_t = 10.0)]
    pub lr_drop_factor: f64,
    /// Side of the texture-loss patches
    #[arg(long, default_value_t = 4)]
    pub texture_patch: usize,
    /// Stop after this many optimizer steps in total
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Print progress to stderr every this many steps (0 disables)
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
    /// Seed for initialisation and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DerainArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Rainy image or directory of rainy images
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Output image (for a file input) or directory (for a directory input)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Also write the predicted rain layer, to this file or directory
    #[arg(long, value_name = "PATH")]
    pub residual_out: Option<PathBuf>,
    /// Refuse checkpoints whose trunk depth differs
    #[arg(long, value_parser = parse_blocks)]
    pub blocks: Option<usize>,
    /// Refuse checkpoints whose channel attention setting differs
    #[arg(long, value_enum)]
    pub ca: Option<Switch>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of restored images
    #[arg(long, value_name = "DIR")]
    pub restored: PathBuf,
    /// Directory of ground-truth images, matched by image id
    #[arg(long, value_name = "DIR")]
    pub truth: PathBuf,
    /// CSV destination [default: stdout]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random inputs per check
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Checks through the full network
    #[arg(long, value_enum, default_value_t = Switch::On, num_args = 0..=1, default_missing_value = "on")]
    pub network: Switch,
    /// Seed for the random inputs
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Desk scale: a synthetic corpus, batch 4 and a short run per preset
    #[arg(long)]
    pub desk: bool,
    /// Corpus root with rain/ and norain/; without it a synthetic corpus is generated
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Pairs of the synthetic corpus
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Side of the synthetic images
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Trailing pairs (by id) held out for evaluation
    #[arg(long, default_value_t = 4)]
    pub held_out: usize,
    /// Optimizer steps per preset [default: 100 with --desk, otherwise the full schedule]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Augmentation crop side [default: the image size with --desk, otherwise 64]
    #[arg(long)]
    pub crop: Option<usize>,
    /// Batch size [default: 4 with --desk, otherwise 16]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Results CSV
    #[arg(long, value_name = "FILE", default_value = "ablation.csv")]
    pub out: PathBuf,
    /// Seed for the synthetic corpus, initialisation and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// One row of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub edge: bool,
    pub texture: bool,
    pub weighting: Strategy,
    pub fixed_weights: [f64; 3],
    pub channel_attention: bool,
}

const fn preset(
    name: &'static str,
    edge: bool,
    texture: bool,
    weighting: Strategy,
    fixed_weights: [f64; 3],
    channel_attention: bool,
) -> Preset {
    Preset {
        name,
        edge,
        texture,
        weighting,
        fixed_weights,
        channel_attention,
    }
}

const NO_FIXED: [f64; 3] = [1.0, 0.0, 0.0];

pub const PRESETS: [Preset; 8] = [
    preset("Lp", false, false, Strategy::Fixed, [1.0, 0.0, 0.0], false),
    preset(
        "LpLe+Fixed",
        true,
        false,
        Strategy::Fixed,
        [1.0, 1e-2, 0.0],
        false,
    ),
    preset(
        "LpLe+GB",
        true,
        false,
        Strategy::GradientBalanced,
        NO_FIXED,
        false,
    ),
    preset(
        "LpLe+LB",
        true,
        false,
        Strategy::LossBalanced,
        NO_FIXED,
        false,
    ),
    preset(
        "LpLeLt+GB",
        true,
        true,
        Strategy::GradientBalanced,
        NO_FIXED,
        false,
    ),
    preset(
        "LpLeLt+LB",
        true,
        true,
        Strategy::LossBalanced,
        NO_FIXED,
        false,
    ),
    preset(
        "LpLeLt+GB+CA",
        true,
        true,
        Strategy::GradientBalanced,
        NO_FIXED,
        true,
    ),
    preset(
        "LpLeLt+LB+CA",
        true,
        true,
        Strategy::LossBalanced,
        NO_FIXED,
        true,
    ),
];

pub const ABLATION_HEADER: &str = "preset,L_p,L_e,L_t,Fixed,GB,LB,CA,ssim,psnr";

impl Preset {
    /// Component flags in column order `L_p,L_e,L_t,Fixed,GB,LB,CA`. A lone
    /// pixel loss has nothing to weight, so no weighting column is set.
    pub fn flags(&self) -> [bool; 7] {
        let combined = self.edge || self.texture;
        [
            true,
            self.edge,
            self.texture,
            combined && self.weighting == Strategy::Fixed,
            self.weighting == Strategy::GradientBalanced,
            self.weighting == Strategy::LossBalanced,
            self.channel_attention,
        ]
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(&a).map(|()| EXIT_OK),
        Command::Train(a) => train(&a).map(|()| EXIT_OK),
        Command::Derain(a) => derain(&a).map(|()| EXIT_OK),
        Command::Eval(a) => eval(&a).map(|()| EXIT_OK),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Ablate(a) => ablate(&a).map(|()| EXIT_OK),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

/// Reads `key = value` lines into `--key=value` arguments.
fn config_args(path: &Path, subcommand: &str) -> std::result::Result<Vec<String>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut command = Cli::command();
    command.build();
    let sub = command
        .find_subcommand(subcommand)
        .ok_or_else(|| format!("unknown command `{subcommand}`"))?;
    let known: Vec<(String, bool)> = sub
        .get_arguments()
        .filter_map(|a| {
            let long = a.get_long()?;
            Some((long.to_string(), a.get_action().takes_values()))
        })
        .filter(|(l, _)| l != "config" && l != "help")
        .collect();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), n + 1))?;
        let key = key.trim().replace('_', "-");
        let Some(&(_, takes_value)) = known.iter().find(|(l, _)| *l == key) else {
            return Err(format!(
                "{}:{}: unknown key `{key}` for `{subcommand}`",
                path.display(),
                n + 1
            ));
        };
        let value = value.trim();
        if takes_value {
            out.push(format!("--{key}={value}"));
        } else {
            match value {
                "true" => out.push(format!("--{key}")),
                "false" => {}
                _ => {
                    return Err(format!(
                        "{}:{}: `{key}` takes true or false, got `{value}`",
                        path.display(),
                        n + 1
                    ))
                }
            }
        }
    }
    Ok(out)
}

/// Splices the config file's arguments in right after the subcommand name.
fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let mut config = None;
    for (i, a) in argv.iter().enumerate().skip(1) {
        if a == "--" {
            break;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if a == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = config else {
        return Ok(argv);
    };
    let names: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    let Some(pos) = argv
        .iter()
        .skip(1)
        .position(|a| names.contains(a))
        .map(|p| p + 1)
    else {
        return Ok(argv);
    };
    let extra = config_args(&path, &argv[pos])?;
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut rain = match a.rain {
        RainPreset::Light => RainParams::light(a.seed),
        RainPreset::Moderate => RainParams::moderate(a.seed),
        RainPreset::Heavy => RainParams::heavy(a.seed),
    };
    rain.density = a.density.unwrap_or(rain.density);
    rain.length = a.length.unwrap_or(rain.length);
    rain.angle_deg = a.angle.unwrap_or(rain.angle_deg);
    rain.intensity = a.intensity.unwrap_or(rain.intensity);
    rain.validate()?;

    let pairs = match &a.clean {
        Some(dir) => {
            let images = list_images(dir)?;
            if images.is_empty() {
                return Err(Error::Data(format!(
                    "no PNG/PPM images in {}",
                    dir.display()
                )));
            }
            images
                .into_iter()
                .enumerate()
                .map(|(i, (id, path))| {
                    let p = RainParams {
                        seed: a.seed.wrapping_mul(7_919).wrapping_add(i as u64 + 1),
                        ..rain.clone()
                    };
                    synthesize_rain(id, &read_image(&path)?, &p)
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            if a.count == 0 || a.size == 0 {
                return Err(Error::Config(
                    "--count and --size must be at least 1".into(),
                ));
            }
            synthetic_corpus(a.count, a.size, a.size, &rain, a.seed)?
        }
    };
    save_corpus(&a.out, &pairs, a.format.ext())?;
    eprintln!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

/// Training patches: the pairs themselves when they already have side `crop`,
/// otherwise their ten-fold crop/flip augmentation.
fn training_patches(pairs: &[ImagePair], crop: usize) -> Result<Vec<ImagePair>> {
    if pairs
        .iter()
        .all(|p| p.height() == crop && p.width() == crop)
    {
        Ok(pairs.to_vec())
    } else {
        augment_all(pairs, crop)
    }
}

fn progress(step: u64, every: u64, log: &crate::train::StepLog) {
    if every > 0 && step % every == 0 {
        let r = &log.report;
        eprintln!(
            "step {step} epoch {} lr {:.1e} L_p {:.4e} L_e {:.4e} L_t {:.4e} w ({:.3}, {:.3}, {:.3}) total {:.4e}",
            log.epoch, log.lr, r.l_p, r.l_e, r.l_t, r.w_p, r.w_e, r.w_t, r.total
        );
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let batch_size = a.batch.unwrap_or(if a.desk { 4 } else { 16 });
    let crop = a.crop.unwrap_or(if a.desk { 32 } else { 64 });
    let cfg = TrainConfig {
        learning_rate: a.lr,
        lr_drop_epoch: a.lr_drop_epoch,
        lr_drop_factor: a.lr_drop_factor,
        epochs: a.epochs,
        batch_size,
        enable_edge: a.loss_e.is_on(),
        enable_texture: a.loss_t.is_on(),
        weighting: a.weighting.into(),
        fixed_weights: a.fixed_w.0,
        texture: TextureLossConfig {
            patch: a.texture_patch,
        },
        seed: a.seed,
        max_steps: a.max_steps,
        checkpoint_path: Some(a.checkpoint.clone()),
        log_path: Some(a.log.clone()),
    };
    let model = ModelConfig {
        num_residual_blocks: a.model.blocks,
        use_channel_attention: a.model.ca.is_on(),
        seed: a.seed,
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let pairs = load_corpus(&a.data)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no image pairs under {}",
            a.data.display()
        )));
    }
    let patches = training_patches(&pairs, crop)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.ensure_matches(&model)?;
            Trainer::from_checkpoint(ckpt, cfg)?
        }
        None => {
            if a.log.exists() {
                fs::remove_file(&a.log).map_err(|e| Error::io(&a.log, e))?;
            }
            Trainer::new(model, cfg)?
        }
    };
    eprintln!(
        "training on {} patches of {crop}×{crop} from {} pairs, batch {batch_size}, starting at step {}",
        patches.len(),
        pairs.len(),
        trainer.step()
    );
    let summary = trainer.run(&patches, |log| {
        append_log(&a.log, std::slice::from_ref(log))?;
        progress(log.step, a.log_every, log);
        Ok(())
    })?;
    eprintln!(
        "{} steps in {:.1} s; checkpoint {}",
        summary.steps,
        summary.elapsed.as_secs_f64(),
        a.checkpoint.display()
    );
    Ok(())
}

fn derain(a: &DerainArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if let Some(blocks) = a.blocks {
        if blocks != ckpt.model.num_residual_blocks {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} residual blocks, expected {blocks}",
                ckpt.model.num_residual_blocks
            )));
        }
    }
    if let Some(ca) = a.ca {
        if ca.is_on() != ckpt.model.use_channel_attention {
            return Err(Error::Checkpoint(format!(
                "checkpoint channel attention is {}, expected {}",
                ckpt.model.use_channel_attention,
                ca.is_on()
            )));
        }
    }

    if a.input.is_dir() {
        let inputs = list_images(&a.input)?;
        if inputs.is_empty() {
            return Err(Error::Data(format!(
                "no PNG/PPM images in {}",
                a.input.display()
            )));
        }
        fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        if let Some(dir) = &a.residual_out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for (id, path) in &inputs {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
            let (b, r) = restore_image(&ckpt.params, &ckpt.model, &read_image(path)?)?;
            write_image(&a.out.join(format!("derained-{id}.{ext}")), &b)?;
            if let Some(dir) = &a.residual_out {
                write_image(&dir.join(format!("residual-{id}.{ext}")), &r)?;
            }
        }
        eprintln!("de-rained {} images into {}", inputs.len(), a.out.display());
    } else {
        if ImageKind::from_path(&a.out).is_none() {
            return Err(Error::Config(format!(
                "output {} needs a .png or .ppm extension",
                a.out.display()
            )));
        }
        let image = read_image(&a.input)?;
        let (b, r) = infer(&ckpt, None, &[image])?.remove(0);
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_image(&a.out, &b)?;
        if let Some(path) = &a.residual_out {
            write_image(path, &r)?;
        }
    }
    Ok(())
}

fn report_means(e: &Evaluation) {
    match e.mean_psnr {
        Some(p) => eprintln!(
            "{} images: mean PSNR {p:.4} dB, mean SSIM {:.6}",
            e.rows.len(),
            e.mean_ssim
        ),
        None => eprintln!(
            "{} images: every PSNR infinite, mean SSIM {:.6}",
            e.rows.len(),
            e.mean_ssim
        ),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let evaluation = evaluate_dirs(&a.restored, &a.truth)?;
    let csv = evaluation.to_csv();
    match &a.out {
        Some(path) => fs::write(path, csv).map_err(|e| Error::io(path, e))?,
        None => print!("{csv}"),
    }
    report_means(&evaluation);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<i32> {
    if a.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let started = Instant::now();
    let entries = suite(&SuiteConfig {
        trials: a.trials,
        seed: a.seed,
        include_network: a.network.is_on(),
    })?;
    let mut failed = 0;
    for e in &entries {
        let verdict = if e.report.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!e.report.passed());
        println!(
            "{:<40} max rel err {:.3e}  tol {:.0e}  {:>5} coords  {verdict}",
            e.name, e.report.max_rel_error, e.report.tolerance, e.report.checked
        );
    }
    println!(
        "{} checks, {failed} failed, {:.1} s",
        entries.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERIC })
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let pairs = match &a.data {
        Some(root) => load_corpus(root)?,
        None => synthetic_corpus(a.count, a.size, a.size, &RainParams::light(a.seed), a.seed)?,
    };
    if a.held_out == 0 || a.held_out >= pairs.len() {
        return Err(Error::Config(format!(
            "--held-out {} must leave at least one of {} pairs on each side",
            a.held_out,
            pairs.len()
        )));
    }
    let (train_pairs, test_pairs) = pairs.split_at(pairs.len() - a.held_out);
    let crop = a.crop.unwrap_or(if a.desk {
        train_pairs[0].height().min(train_pairs[0].width())
    } else {
        64
    });
    let patches = training_patches(train_pairs, crop)?;
    let base = if a.desk {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    };
    let batch_size = a.batch.unwrap_or(base.batch_size);
    let max_steps = a.steps.or(if a.desk { Some(100) } else { None });

    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for p in &PRESETS {
        let cfg = TrainConfig {
            batch_size,
            enable_edge: p.edge,
            enable_texture: p.texture,
            weighting: p.weighting,
            fixed_weights: p.fixed_weights,
            seed: a.seed,
            max_steps,
            ..base.clone()
        };
        let model = ModelConfig {
            use_channel_attention: p.channel_attention,
            seed: a.seed,
            ..ModelConfig::default()
        };
        let mut trainer = Trainer::new(model, cfg)?;
        let summary = trainer.run(&patches, |_| Ok(()))?;
        let triples = test_pairs
            .iter()
            .map(|t| {
                let (b, _) = restore_image(&trainer.params, &trainer.model, &t.rainy)?;
                Ok((t.id.clone(), b, t.clean.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let evaluation = evaluate_corpus(&triples)?;
        let psnr = evaluation.mean_psnr.unwrap_or(f64::INFINITY);
        let _ = write!(csv, "{}", p.name);
        for f in p.flags() {
            let _ = write!(csv, ",{}", u8::from(f));
        }
        let _ = writeln!(csv, ",{:.6},{:.4}", evaluation.mean_ssim, psnr);
        eprintln!(
            "{:<14} {} steps in {:.1} s: SSIM {:.4} PSNR {:.2} dB",
            p.name,
            summary.steps,
            summary.elapsed.as_secs_f64(),
            evaluation.mean_ssim,
            psnr
        );
    }
    if let Some(parent) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_triples_parse() {
        assert_eq!(
            "1, 0.01,0".parse::<WeightTriple>().unwrap(),
            WeightTriple([1.0, 0.01, 0.0])
        );
        assert!("1,2".parse::<WeightTriple>().is_err());
        assert!("1,x,2".parse::<WeightTriple>().is_err());
    }

    #[test]
    fn presets_cover_the_grid() {
        let grid: Vec<[bool; 7]> = PRESETS.iter().map(Preset::flags).collect();
        let expected = [
            [true, false, false, false, false, false, false],
            [true, true, false, true, false, false, false],
            [true, true, false, false, true, false, false],
            [true, true, false, false, false, true, false],
            [true, true, true, false, true, false, false],
            [true, true, true, false, false, true, false],
            [true, true, true, false, true, false, true],
            [true, true, true, false, false, true, true],
        ];
        assert_eq!(grid, expected);
    }

    #[test]
    fn every_flag_is_documented() {
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            for arg in sub.get_arguments() {
                if arg
                    .get_long()
                    .is_some_and(|l| l != "help" && l != "version")
                {
                    assert!(
                        arg.get_help().is_some(),
                        "{} --{:?}",
                        sub.get_name(),
                        arg.get_long()
                    );
                }
            }
        }
        cmd.debug_assert();
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["menet"]), EXIT_USAGE);
        assert_eq!(run(["menet", "frobnicate"]), EXIT_USAGE);
        assert_eq!(
            run(["menet", "train", "--data", "x", "--weighting", "avg"]),
            EXIT_USAGE
        );
        assert_eq!(
            run(["menet", "train", "--data", "x", "--blocks", "12"]),
            EXIT_USAGE
        );
        assert_eq!(run(["menet", "--help"]), EXIT_OK);
    }

    #[test]
    fn config_file_values_yield_to_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(
            &cfg,
            "# defaults\ndata = corpus\nweighting = lb\nfixed_w = 1,0,0\nca = off\ndesk = true\n",
        )
        .unwrap();
        let cfg_arg = cfg.to_str().unwrap();
        let argv = expand_config(
            ["menet", "train", "--config", cfg_arg, "--weighting", "gb"]
                .map(String::from)
                .to_vec(),
        )
        .unwrap();
        let Command::Train(t) = Cli::try_parse_from(&argv).unwrap().command else {
            panic!("expected train");
        };
        assert_eq!(t.data, PathBuf::from("corpus"));
        assert_eq!(t.weighting, WeightingArg::Gb);
        assert_eq!(t.fixed_w, WeightTriple([1.0, 0.0, 0.0]));
        assert_eq!(t.model.ca, Switch::Off);
        assert_eq!(t.model.blocks, 8);
        assert!(t.desk);

        fs::write(&cfg, "data = corpus\nlearning_rate = 1\n").unwrap();
        assert!(expand_config(
            ["menet", "train", "--config", cfg_arg]
                .map(String::from)
                .to_vec()
        )
        .is_err());
        assert_eq!(run(["menet", "train", "--config", cfg_arg]), EXIT_USAGE);
    }

    #[test]
    fn missing_inputs_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent");
        let m = missing.to_str().unwrap();
        assert_eq!(
            run(["menet", "eval", "--restored", m, "--truth", m]),
            EXIT_DATA
        );
        assert_eq!(
            run([
                "menet",
                "derain",
                "--checkpoint",
                m,
                "--input",
                m,
                "--out",
                "x.png"
            ]),
            EXIT_DATA
        );
    }
}
