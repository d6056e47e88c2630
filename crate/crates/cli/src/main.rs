use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tissue_recon::io::write_sequence;
use tissue_recon::pipeline::{bench, run_pipeline, MaskSource, PipelineConfig, Profile, BENCH_FRAMES, BENCH_WARMUP};
use tissue_recon::sim::{preset, Simulator};
use tissue_recon::Error;

#[derive(Debug, Parser)]
#[command(name = "tissue-recon", version, about = "Stereo surfel reconstruction of deforming tissue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reconstruct a stereo sequence directory.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        profile: Option<Profile>,
        /// Directory of external depth maps used instead of stereo.
        #[arg(long)]
        depth_dir: Option<PathBuf>,
        #[arg(long)]
        mask_provider: Option<MaskSource>,
        /// JSON file mirroring the pipeline configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Score each frame against its reprojection.
        #[arg(long)]
        eval: bool,
    },
    /// Render a simulated sequence in the input layout.
    Simulate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Print per-stage latency on a simulated preset as JSON.
    Bench {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = BENCH_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = BENCH_WARMUP)]
        warmup: usize,
        #[arg(long, default_value = "efficient")]
        profile: Profile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::EmptyInput(_) => 2,
        Error::Config(_) => 3,
        Error::Ingestion { .. } | Error::Io(_) | Error::Image(_) | Error::Json(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Reconstruct {
            input,
            output,
            profile,
            depth_dir,
            mask_provider,
            config,
            seed,
            eval,
        } => {
            let mut cfg = match &config {
                Some(path) => PipelineConfig::from_json_file(path)?,
                None => PipelineConfig::default(),
            };
            if let Some(p) = profile {
                cfg.profile = p;
            }
            if let Some(m) = mask_provider {
                cfg.mask.provider = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.eval |= eval;
            cfg.input = Some(input);
            cfg.output = Some(output.clone());
            cfg.depth_dir = depth_dir.or(cfg.depth_dir);
            let out = run_pipeline(&cfg)?;
            eprintln!(
                "{} frames, {} surfels, {} nodes, {} flagged; wrote {}",
                out.trajectory.len(),
                out.map.len(),
                out.graph.len(),
                out.flagged_frames.len(),
                output.display()
            );
            Ok(())
        }
        Command::Simulate {
            preset: name,
            output,
            seed,
            frames,
        } => {
            let mut sc = preset(&name, seed)?;
            if let Some(n) = frames {
                sc.frames = n;
            }
            let sim = Simulator::new(sc.clone())?;
            let frames: Vec<_> = (0..sim.len()).map(|i| sim.frame(i)).collect();
            write_sequence(&output, &sc.intrinsics, &frames)?;
            eprintln!("wrote {} frames of '{name}' to {}", frames.len(), output.display());
            Ok(())
        }
        Command::Bench {
            preset: name,
            frames,
            warmup,
            profile,
            seed,
        } => {
            let sim = Simulator::new(preset(&name, seed)?)?;
            let report = bench(&PipelineConfig::with_profile(profile), &sim, &name, frames, warmup)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
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
