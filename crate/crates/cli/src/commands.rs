//! Subcommand definitions and their implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use outdreamer_core::codec::PixelMask;
use outdreamer_core::diffusion::{NoiseSchedule, SamplerConfig};
use outdreamer_core::metrics::{psnr, ssim};
use outdreamer_core::model::OutDreamer;
use outdreamer_core::pipeline::{make_eval_mask, outpaint, outpaint_long, EvalMaskSpec, LongVideoConfig};
use outdreamer_core::refiner::{refine_clip, ByteVideo, RefinerOptions, RefinerPair};
use outdreamer_core::rng::Rng;
use outdreamer_core::training::{synth_video, MaskDirection, Trainer};

use crate::config::{parse_shape, TrainFile};
use crate::frames::{load_frames, save_frames};
use crate::{checkpoint, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "outdreamer", version, about = "Mask-driven video outpainting on a toy latent diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic moving-rectangle videos and write a checkpoint.
    Train(TrainArgs),
    /// Write a synthetic video as a frame directory.
    Synth(SynthArgs),
    /// Outpaint a single clip.
    Outpaint(OutpaintArgs),
    /// Outpaint a long video clip by clip with colour refinement.
    OutpaintLong(LongArgs),
    /// Colour-refine a clip against frames it shares with a previous clip.
    Refine(RefineArgs),
    /// Compare two frame directories.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value training file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of per-step losses.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides `steps` from the config file.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `<rows>x<cols>x<frames>`
    #[arg(long, default_value = "16x16x8")]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Direction {
    Horizontal,
    Vertical,
}

impl From<Direction> for MaskDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Horizontal => MaskDirection::Horizontal,
            Direction::Vertical => MaskDirection::Vertical,
        }
    }
}

#[derive(Debug, Args)]
pub struct OutpaintArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Fraction of the frame to generate, split evenly between both sides.
    #[arg(long, default_value_t = 0.25)]
    pub mask_ratio: f64,
    #[arg(long, value_enum, default_value_t = Direction::Horizontal)]
    pub direction: Direction,
    /// Sampling steps.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 3.0)]
    pub cfg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LongArgs {
    #[command(flatten)]
    pub base: OutpaintArgs,
    #[arg(long, default_value_t = 29)]
    pub clip_len: usize,
    #[arg(long, default_value_t = 3)]
    pub overlap: usize,
    /// Skip mean/variance alignment.
    #[arg(long)]
    pub no_mva: bool,
    /// Skip histogram matching.
    #[arg(long)]
    pub no_histogram: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Frames from the previous clip shared with the start of `target`.
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub no_mva: bool,
    #[arg(long)]
    pub no_histogram: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub reference: PathBuf,
    pub candidate: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Outpaint(a) => outpaint_cmd(a),
        Command::OutpaintLong(a) => outpaint_long_cmd(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
    }
}

fn train(args: TrainArgs) -> CliResult<()> {
    let mut file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            TrainFile::parse(&text).map_err(|m| CliError::format(path, m))?
        }
        None => TrainFile::default(),
    };
    if let Some(steps) = args.steps {
        file.train.steps = steps;
    }
    if let Some(seed) = args.seed {
        file.train.seed = seed;
    }
    let mut model = OutDreamer::new(file.model, file.train.seed)?;
    let mut trainer = Trainer::new(file.train, NoiseSchedule::default_linear())?;
    let mut log = match &args.log {
        Some(path) => {
            let f = File::create(path).map_err(|e| CliError::io(path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "step, t, L_eps, L_latent, L_total").map_err(|e| CliError::io(path, e))?;
            Some((path, w))
        }
        None => None,
    };
    let mut write_error = None;
    trainer.run(&mut model, |entry| {
        if let Some((path, w)) = log.as_mut() {
            if let Err(e) = writeln!(w, "{}", entry.line()) {
                write_error.get_or_insert(CliError::io(path, e));
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    checkpoint::save(&args.out, &model)
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let (rows, cols, frames) = parse_shape(&args.shape).map_err(CliError::Usage)?;
    let video = synth_video(rows, cols, frames, &mut Rng::seed(args.seed))?;
    save_frames(&args.out, &video)
}

fn sampler(args: &OutpaintArgs) -> SamplerConfig {
    SamplerConfig {
        steps: args.steps,
        cfg_scale: args.cfg,
        seed: args.seed,
        clip_z0: Some((0.0, 1.0)),
        ..SamplerConfig::default()
    }
}

fn eval_mask(args: &OutpaintArgs, rows: usize, cols: usize, frames: usize) -> CliResult<PixelMask> {
    let spec = EvalMaskSpec {
        ratio: args.mask_ratio,
        direction: args.direction.into(),
    };
    Ok(make_eval_mask(spec, rows, cols, frames)?.pixel)
}

fn outpaint_cmd(args: OutpaintArgs) -> CliResult<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let input = load_frames(&args.input)?;
    let mask = eval_mask(&args, input.rows(), input.cols(), input.frames())?;
    let out = outpaint(&model, &NoiseSchedule::default_linear(), &sampler(&args), &input, &mask)?;
    save_frames(&args.output, &out.blended)
}

fn refiner_options(no_mva: bool, no_histogram: bool) -> RefinerOptions {
    RefinerOptions {
        mean_variance: !no_mva,
        histogram: !no_histogram,
    }
}

fn outpaint_long_cmd(args: LongArgs) -> CliResult<()> {
    let base = &args.base;
    let model = checkpoint::load(&base.checkpoint)?;
    let input = load_frames(&base.input)?;
    let mask = eval_mask(base, input.rows(), input.cols(), input.frames())?;
    let config = LongVideoConfig {
        clip_len: args.clip_len,
        overlap: args.overlap,
        refiner: refiner_options(args.no_mva, args.no_histogram),
    };
    let out = outpaint_long(&model, &NoiseSchedule::default_linear(), &sampler(base), &input, &mask, &config)?;
    save_frames(&base.output, &out)
}

fn refine(args: RefineArgs) -> CliResult<()> {
    let template = ByteVideo::from_pixels(&load_frames(&args.template)?);
    let target = ByteVideo::from_pixels(&load_frames(&args.target)?);
    let pair = RefinerPair::from_overlap(template, target)?;
    let refined = refine_clip(&pair, refiner_options(args.no_mva, args.no_histogram))?;
    save_frames(&args.output, &refined.to_pixels())
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let a = load_frames(&args.reference)?;
    let b = load_frames(&args.candidate)?;
    let p = psnr(&a, &b, None)?;
    let s = ssim(&a, &b)?;
    println!("PSNR {p:.4} dB SSIM {s:.6} LPIPS n/a FVD n/a");
    Ok(())
}
