use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hoistlab_core::config::RunConfig;
use hoistlab_core::pipeline;
use hoistlab_core::Error;

#[derive(Parser, Debug)]
#[command(name = "hoistlab", version, about = "Hand-held object segmentation and tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (dataset root for `synth`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint file, overriding `io.checkpoint_path`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Minimum track probability for a prediction.
    #[arg(long = "score-thresh")]
    score_thresh: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and print its statistics.
    Synth(Common),
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Write predictions.json for the configured clips.
    Predict(Common),
    /// Score predictions.json against the configured clips.
    Eval(Common),
    /// Render per-frame overlays of predictions.json.
    Viz(Common),
}

/// A failure reported as one `error kind=... message=...` line.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (Command::Synth(c) | Command::Train(c) | Command::Predict(c) | Command::Eval(c) | Command::Viz(c)) = &cli.command;
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(t) = c.score_thresh {
        cfg.io.score_thresh = t;
        cfg.validate()?;
    }
    let out = c.out.as_deref();
    let ckpt = c.checkpoint.as_deref();
    match &cli.command {
        Command::Synth(_) => {
            let s = pipeline::cmd_synth(&cfg, out)?;
            print!("{}", s.table);
            println!("wrote {} clips to {}", s.dataset.clips.len(), s.root.display());
        }
        Command::Train(_) => {
            let report = pipeline::cmd_train(&cfg, ckpt, out)?;
            let last = report.history.last().copied().unwrap_or_default();
            println!("{}", serde_json::json!({ "iterations": report.history.len(), "final_loss": last }));
        }
        Command::Predict(_) => {
            let path = pipeline::cmd_predict(&cfg, ckpt, out, c.score_thresh)?;
            println!("wrote {}", path.display());
        }
        Command::Eval(_) => {
            let r = pipeline::cmd_eval(&cfg, out)?;
            println!("AP {:.6} (ground truth {}, predictions {})", r.ap, r.n_gt, r.n_pred);
            for clip in &r.per_clip {
                println!("  {} tp {} fp {} fn {}", clip.clip_id, clip.tp, clip.fp, clip.fn_);
            }
        }
        Command::Viz(_) => {
            let written = pipeline::cmd_viz(&cfg, out)?;
            println!("wrote {} overlay images", written.len());
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error kind=usage message={:?}", one_line(&first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} message={:?}", f.kind, one_line(&f.message));
            ExitCode::from(1)
        }
    }
}
