use std::path::PathBuf;
use std::process::ExitCode;

use bagalign::pipeline::{self, Overrides, Run};
use bagalign::trainer::Preset;
use bagalign::zeroshot::PromptMode;
use bagalign::metrics::format_table;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bagalign", version, about = "Bag-level vision-language alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trainer defaults to start from.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Evaluate this top-K only (eval-slides).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Prompt ensembling for zero-shot commands.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset into the run's data directory.
    GenSynth,
    /// Build and prune text/visual bags for every image.
    BuildBags,
    /// Train the two-tower encoder on the bags.
    Train,
    /// Zero-shot classification of labeled test images.
    EvalTiles,
    /// Top-K pooled slide classification with a K sweep.
    EvalSlides,
    /// Overlap-averaged slide segmentation to PGM masks.
    Segment,
}

#[derive(ValueEnum, Clone, Copy)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(ValueEnum, Clone, Copy)]
enum ModeArg {
    Single,
    Merged,
}

fn run(cli: &Cli) -> bagalign::Result<()> {
    let config = cli
        .config
        .as_ref()
        .ok_or_else(|| bagalign::Error::InvalidConfig("--config is required".into()))?;
    let overrides = Overrides {
        seed: cli.seed,
        preset: cli.preset.map(|p| match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }),
        out_dir: cli.out.clone(),
    };
    let run = Run::from_file(config, &overrides)?;
    let mode = match cli.mode {
        Some(ModeArg::Single) => PromptMode::Single,
        Some(ModeArg::Merged) => PromptMode::Merged,
        None => run.config.zeroshot.mode,
    };
    println!("run directory: {}", run.run_dir.display());
    match cli.command {
        Command::GenSynth => {
            let s = pipeline::gen_synth(&run)?;
            println!("wrote {} images and {} slides ({})", s.images, s.slides, s.manifest.display());
        }
        Command::BuildBags => {
            let (_, s) = pipeline::build_bags(&run)?;
            println!(
                "{} bag pairs; mean text bag {:.2} (max {}), mean visual bag {:.2} (max {})",
                s.images, s.mean_text_bag, s.max_text_bag, s.mean_visual_bag, s.max_visual_bag
            );
        }
        Command::Train => {
            let (_, s) = pipeline::train_encoder(&run)?;
            println!("{} steps on {} bags; loss {:.6} -> {:.6}", s.steps, s.bags, s.initial_loss, s.final_loss);
        }
        Command::EvalTiles => {
            let r = pipeline::eval_tiles(&run, mode)?;
            print!("{}", format_table(&[("tiles".into(), r.metrics)]));
        }
        Command::EvalSlides => {
            let r = pipeline::eval_slides(&run, mode, cli.k)?;
            print!("{}", format_table(&[(format!("slides (K={})", r.best_k), r.metrics.clone())]));
            for row in &r.sweep {
                println!("K={:<4} balanced accuracy {:.3}", row.k, row.balanced_accuracy);
            }
        }
        Command::Segment => {
            let r = pipeline::segment(&run, mode)?;
            println!("{} masks in {}", r.slides.len(), run.masks_dir().display());
            if let Some(d) = r.mean_dice {
                println!("mean Dice of planted regions: {d:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
