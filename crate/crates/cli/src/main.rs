use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use refseg_core::harness::{self, ablate, RunConfig, Trainer};
use refseg_core::parser::{decompose_corpus, CategoryLexicon, SpatialLexicon};
use refseg_core::synth;

#[derive(Parser)]
#[command(name = "refseg", version, about = "Referring segmentation for remote-sensing imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add ground_object / spatial_position fragments to a JSONL corpus.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Category lexicon; defaults to the bundled RefSegRS list.
        #[arg(long)]
        categories: Option<PathBuf>,
        /// Spatial phrase lexicon; defaults to the bundled list.
        #[arg(long)]
        spatial: Option<PathBuf>,
        /// Exit with status 2 when any record was skipped.
        #[arg(long)]
        strict: bool,
    },
    /// Write a synthetic split (images/, masks/, refs.jsonl).
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synth::DEFAULT_CANVAS)]
        canvas: usize,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save intermediate tensors of the first batch under run_dir/debug/.
        #[arg(long)]
        debug_dump: bool,
    },
    /// Evaluate a checkpoint and write report.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        save_masks: bool,
    },
    /// Segment one image and write mask.png and overlay.png.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "infer_out")]
        out: PathBuf,
        #[arg(long)]
        debug_dump: bool,
    },
    /// Train one model per toggle combination and print the comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of fiam, tmem, cm, gob, spb.
        #[arg(long, default_value = "fiam,tmem")]
        axes: String,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Parse {
            input,
            output,
            categories,
            spatial,
            strict,
        } => {
            let cats = match categories {
                Some(p) => CategoryLexicon::load(&p)?,
                None => CategoryLexicon::refsegrs(),
            };
            let spatial = match spatial {
                Some(p) => SpatialLexicon::load(&p)?,
                None => SpatialLexicon::default_lexicon(),
            };
            let summary = decompose_corpus(&input, &output, &cats, &spatial)?;
            println!("{} records written, {} skipped", summary.written, summary.skipped);
            if strict && summary.skipped > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Synth { n, seed, out, canvas } => {
            synth::generate_split(n, seed, canvas, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train {
            config,
            resume,
            debug_dump,
        } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let mut trainer = match resume {
                Some(ckpt) => {
                    let fresh = Trainer::new(&cfg)?;
                    Trainer::resume(&ckpt, fresh.train, fresh.val, Some(cfg.epochs))?
                }
                None => Trainer::new(&cfg)?,
            };
            let outcome = trainer.run()?;
            if debug_dump {
                println!("intermediates: {}", trainer.dump_intermediates()?.display());
            }
            if let Some(last) = outcome.history.last() {
                println!("final epoch {}: loss {:.4}", last.epoch + 1, last.mean_loss);
            }
            if let Some(r) = &outcome.report {
                print!("{}", r.table());
            }
            println!("checkpoint: {}", outcome.last.display());
        }
        Command::Eval {
            ckpt,
            data,
            out,
            save_masks,
        } => {
            let out = out.unwrap_or_else(|| ckpt.clone());
            let report = harness::evaluate_checkpoint(&ckpt, &data, &out, save_masks)?;
            print!("{}", report.table());
            println!("report: {}", out.join("report.json").display());
        }
        Command::Infer {
            ckpt,
            image,
            text,
            out,
            debug_dump,
        } => {
            let r = harness::infer(&ckpt, &image, &text, &out, debug_dump)?;
            println!(
                "ground object: {:?}, spatial position: {:?}",
                r.decomposed.ground_object, r.decomposed.spatial_position
            );
            println!("mask: {} ({} pixels)", r.mask_path.display(), r.mask.area());
            println!("overlay: {}", r.overlay_path.display());
            if let Some(p) = r.dump_path {
                println!("intermediates: {}", p.display());
            }
        }
        Command::Ablate { config, axes } => {
            let cfg = RunConfig::load(&config)?;
            let axes = harness::parse_axes(&axes)?;
            let table = ablate(&cfg, &axes)?;
            print!("{}", table.to_text());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
