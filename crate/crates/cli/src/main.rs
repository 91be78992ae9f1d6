use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use recom::data::{self, SyntheticSpec};
use recom::inference::{GenerationContext, IriParams};
use recom::metrics::{self, DiversityMode, ExtractorTraining};
use recom::motion::{MotionClip, Part, SpeakerId};
use recom::train::{self, Models, Stage, TrainConfig, TrainReport, Weights};
use recom::{Error, Result};

#[derive(Parser)]
#[command(name = "recom", version, about = "Audio-driven gesture generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic audio/motion dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 88)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        ids: usize,
    },
    /// Train one part codec.
    TrainVq {
        #[arg(long)]
        part: PartArg,
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the token generator; both codecs must be trained first.
    TrainRet {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the face regressor.
    TrainFace {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate motion (and face parameters when a face checkpoint exists) for an audio file.
    Generate {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        id: u32,
        #[arg(long, default_value_t = 2.0)]
        scale: f64,
        #[arg(long, default_value_t = 10)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Pose container whose tokens are pinned in the first window.
        #[arg(long)]
        anchor: Option<PathBuf>,
        #[arg(long, default_value = "checkpoints")]
        checkpoint: PathBuf,
        /// Use raw parameters instead of the EMA shadow.
        #[arg(long)]
        raw_weights: bool,
    },
    /// Score generated motion files against a dataset.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ExtractorTraining::default().steps)]
        extractor_steps: usize,
        /// Report diversity as the mean pairwise L1 distance between clips.
        #[arg(long)]
        pairwise_diversity: bool,
    },
    /// Print a motion file as CSV or JSON.
    Export {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        format: Format,
        /// Write to a file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Body,
    Hand,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::Body => Part::Body,
            PartArg::Hand => Part::Hand,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn load_config(path: &Path, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    cfg.stage = stage;
    Ok(cfg)
}

fn print_report(stage: Stage, r: &TrainReport) {
    println!("stage={}", stage.name());
    println!("initial_loss={}", r.initial_loss());
    println!("final_loss={}", r.final_loss());
}

fn motion_csv(clip: &MotionClip) -> String {
    let mut out = String::new();
    for row in clip.joint().rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

fn motion_json(clip: &MotionClip) -> String {
    let rows = |m: &ndarray::Array2<f32>| -> Vec<Vec<f32>> { m.rows().into_iter().map(|r| r.to_vec()).collect() };
    serde_json::json!({
        "fps": clip.fps,
        "frames": clip.frames(),
        "body": rows(&clip.body),
        "hand": rows(&clip.hand),
    })
    .to_string()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, clips, seed, frames, ids } => {
            let spec = SyntheticSpec { seed, n_clips: clips, frames, n_ids: ids, ..Default::default() };
            spec.validate()?;
            data::synth_dataset(&out, &spec)?;
            println!("clips={clips}");
        }
        Command::TrainVq { part, config } => {
            let stage = Stage::vq(part.into());
            print_report(stage, &train::train_stage(&load_config(&config, stage)?)?);
        }
        Command::TrainRet { config } => print_report(Stage::Ret, &train::train_stage(&load_config(&config, Stage::Ret)?)?),
        Command::TrainFace { config } => print_report(Stage::Face, &train::train_stage(&load_config(&config, Stage::Face)?)?),
        Command::Generate { audio, id, scale, max_iters, out, anchor, checkpoint, raw_weights } => {
            let params = IriParams { max_iters, guidance_scale: scale, ..Default::default() };
            params.validate()?;
            let audio = data::read_audio(&audio)?;
            let models = Models::load(&checkpoint, if raw_weights { Weights::Raw } else { Weights::Ema })?;
            let id = SpeakerId::new(id, models.n_ids())?;
            let anchors = match anchor {
                Some(path) => models.anchors_from_entries(&data::read_container(&path)?)?,
                None => GenerationContext::new(),
            };
            let generated = models.generate_anchored(&audio, id, &params, &anchors)?;
            train::write_generated(&out, &generated)?;
            println!("frames={}", generated.motion.frames());
        }
        Command::Eval { real, gen, out, extractor_steps, pairwise_diversity } => {
            let cfg = ExtractorTraining { steps: extractor_steps, ..Default::default() };
            let mode = if pairwise_diversity { DiversityMode::Pairwise } else { DiversityMode::Printed };
            let report = metrics::evaluate_dirs(&real, &gen, &cfg, mode)?;
            std::fs::write(&out, report.to_kv())?;
            std::fs::write(out.with_extension("json"), report.to_json())?;
            print!("{}", report.to_kv());
        }
        Command::Export { motion, format, out } => {
            let clip = data::read_motion(&motion)?;
            let text = match format {
                Format::Csv => motion_csv(&clip),
                Format::Json => motion_json(&clip) + "\n",
            };
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_missing_input() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
