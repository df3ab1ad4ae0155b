//! Command-line surface for the Bayer keypoint pipeline: mosaicing RGB
//! images into raw rasters, training the detector and descriptor, running
//! detection and matching on single images, and evaluating scene
//! directories. Every command echoes its effective configuration into a
//! reproducibility manifest and is byte-deterministic under a fixed seed.

mod dataset;
mod ops;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bayernet::Error;

/// Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) | Error::Dimension { .. } => 2,
        Error::NonFinite(_) | Error::Estimation(_) => 3,
    }
}

#[derive(Parser)]
#[command(name = "bayernet", about = "Keypoint detection and description on raw Bayer rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainPhase {
    Detector,
    Descriptor,
    /// Self-supervised detector refinement with homographic-adaptation
    /// pseudo-labels on unlabeled rasters.
    Adapt,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Repeatability,
    Homography,
    Invariance,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of 8-bit RGB PNG images into 16-bit PGM Bayer
    /// rasters (RGGB pattern; odd dimensions are cropped by one pixel).
    Mosaic {
        /// Directory of input PNG images.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the PGM rasters and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector (on synthetic shapes), the descriptor (Siamese
    /// triplet phase), or refine the detector with self-supervised
    /// pseudo-labels (adapt phase); the latter two start from an existing
    /// checkpoint.
    Train {
        #[arg(long, value_enum)]
        phase: TrainPhase,
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of 16-bit PGM rasters for the adapt phase; without
        /// it, adapt runs on generated synthetic images.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trailing --key=value overrides applied after the config file
        /// (place them after the declared flags, e.g. `--epochs=3`).
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "--KEY=VALUE"
        )]
        sets: Vec<String>,
        /// Starting checkpoint (required for the descriptor phase).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory for checkpoint, log, and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect keypoints and write descriptors for one PGM raster.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Minimum keypoint score.
        #[arg(long, default_value_t = 0.1)]
        threshold: f32,
        /// Non-maximum-suppression radius in pixels.
        #[arg(long, default_value_t = 4)]
        nms_radius: usize,
        /// Keypoint cap after score sorting.
        #[arg(long, default_value_t = 2048)]
        max_keypoints: usize,
    },
    /// Match two PGM rasters and draw the correspondences.
    Match {
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold: f32,
        #[arg(long, default_value_t = 4)]
        nms_radius: usize,
        #[arg(long, default_value_t = 2048)]
        max_keypoints: usize,
        /// Keep only mutual nearest-neighbor matches.
        #[arg(long, default_value_t = true)]
        cross_check: bool,
    },
    /// Evaluate scene directories (scene/{1..n}.png plus H_1_k homography
    /// files) and write per-pair CSV rows, per-scene summaries, and match
    /// visualizations.
    Eval {
        #[arg(long, value_enum)]
        task: EvalTask,
        /// Dataset root containing one subdirectory per scene.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Correct-keypoint distance for repeatability.
        #[arg(long, default_value_t = 3.0)]
        eps_rep: f64,
        /// Correct-match / accurate-homography distance.
        #[arg(long, default_value_t = 5.0)]
        eps_hom: f64,
        #[arg(long, default_value_t = 0.1)]
        threshold: f32,
        #[arg(long, default_value_t = 4)]
        nms_radius: usize,
        #[arg(long, default_value_t = 2048)]
        max_keypoints: usize,
        /// Seed for the invariance task's transform sampling and RANSAC.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also draw per-pair match visualizations.
        #[arg(long, default_value_t = true)]
        visualize: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are successful exits; anything else is a
            // usage error and must exit 1 per the exit-code contract.
            let informational = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if informational { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let outcome = match cli.command {
        Command::Mosaic { input, out } => ops::cmd_mosaic(&input, &out),
        Command::Train { phase, config, data, sets, init, out } => {
            ops::cmd_train(phase, config.as_deref(), data.as_deref(), &sets, init.as_deref(), &out)
        }
        Command::Detect { image, checkpoint, out, threshold, nms_radius, max_keypoints } => {
            ops::cmd_detect(&image, &checkpoint, &out, threshold, nms_radius, max_keypoints)
        }
        Command::Match {
            image_a,
            image_b,
            checkpoint,
            out,
            threshold,
            nms_radius,
            max_keypoints,
            cross_check,
        } => ops::cmd_match(
            &image_a,
            &image_b,
            &checkpoint,
            &out,
            threshold,
            nms_radius,
            max_keypoints,
            cross_check,
        ),
        Command::Eval {
            task,
            data,
            checkpoint,
            out,
            eps_rep,
            eps_hom,
            threshold,
            nms_radius,
            max_keypoints,
            seed,
            visualize,
        } => ops::cmd_eval(ops::EvalArgs {
            task,
            data,
            checkpoint,
            out,
            eps_rep,
            eps_hom,
            threshold,
            nms_radius,
            max_keypoints,
            seed,
            visualize,
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
