use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use gazecon::ingest::{load_manifest, preprocess, write_corpus, SynthConfig, VelocitySignal};
use gazecon::pipeline::{load_checkpoint, save_checkpoint, Checkpoint, TrainConfig};
use gazecon::probe::{
    ablation_run, ablation_table, cross_validate, embed_corpus, parse_grid, EmbeddingSet, SvmConfig,
};

#[derive(Parser)]
#[command(name = "gazecon", version, about = "Contrastive gaze representations and linear-probe evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus and its manifest.
    Synth {
        #[arg(long)]
        viewers: usize,
        #[arg(long)]
        per_viewer: usize,
        /// Seconds per recording.
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder; writes the checkpoint and a per-iteration loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode full-length recordings with a trained checkpoint.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Viewer-stratified cross-validated linear probe on embeddings.
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
    },
    /// Train and probe every cell of an augmentation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_signals(manifest: &Path) -> Result<Vec<VelocitySignal>> {
    let recordings = load_manifest(manifest)?;
    let signals = recordings
        .par_iter()
        .map(preprocess)
        .collect::<Result<Vec<_>, _>>()?;
    log::info!("loaded {} recordings from {}", signals.len(), manifest.display());
    Ok(signals)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".loss.csv");
    PathBuf::from(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            viewers,
            per_viewer,
            duration,
            seed,
            out,
        } => {
            let recordings = SynthConfig::new(viewers, per_viewer, duration, seed).generate()?;
            let manifest = write_corpus(&out, &recordings)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let (cfg, overrides) = TrainConfig::from_text(&read_text(&config)?)?;
            for o in &overrides {
                log::info!("override: {o}");
            }
            let signals = load_signals(&data)?;
            let mut state = match resume {
                Some(path) => {
                    let mut state = load_checkpoint(&path)?;
                    state.config.epochs = cfg.epochs;
                    state.config.max_iterations = cfg.max_iterations;
                    state
                }
                None => Checkpoint::fresh(cfg)?,
            };
            let mut log_lines = String::from("epoch,iteration,loss\n");
            let result = state.run(&signals, |r| {
                log_lines.push_str(&format!("{},{},{}\n", r.epoch, r.iteration, r.loss));
                if r.iteration % 50 == 0 {
                    log::info!("epoch {} iteration {} loss {:.5}", r.epoch, r.iteration, r.loss);
                }
            });
            // the state holds the last good step even when training aborts
            save_checkpoint(&state, &out)?;
            fs::write(loss_log_path(&out), log_lines).context("writing loss log")?;
            result?;
            log::info!("saved checkpoint at iteration {} to {}", state.iteration, out.display());
        }
        Command::Embed { ckpt, data, out } => {
            let state = load_checkpoint(&ckpt)?;
            let signals = load_signals(&data)?;
            let set = embed_corpus(&state.params, &signals, state.exec_mode())?;
            set.write_csv(&out)?;
            log::info!("wrote {} embeddings of width {}", set.len(), set.width());
        }
        Command::Eval {
            embeddings,
            report,
            folds,
            seed,
            c,
            iterations,
        } => {
            let set = EmbeddingSet::read_csv(&embeddings)?;
            let fingerprint = format!("{}:{}", embeddings.display(), set.len());
            let r = cross_validate(&set, folds, SvmConfig { c, iterations }, seed, &fingerprint)?;
            fs::write(&report, r.to_json()).with_context(|| format!("writing {}", report.display()))?;
            println!("accuracy {:.4}", r.accuracy);
        }
        Command::Ablate { grid, data, out } => {
            let (cells, settings) = parse_grid(&read_text(&grid)?)?;
            let signals = load_signals(&data)?;
            let rows = ablation_run(&cells, &signals, &settings);
            fs::write(&out, ablation_table(&rows)).with_context(|| format!("writing {}", out.display()))?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} cells failed; see the error column", rows.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
