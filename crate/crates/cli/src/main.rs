use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use volfuse_cli::*;

#[derive(Parser)]
#[command(name = "volfuse", version, about = "Fuse per-view 2D segmentations into one 3D mask")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom corpus
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the fusion network on the training split
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured iteration count, rescaling the rate drops
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Fuse one case with majority voting and the network
    Fuse {
        #[arg(long)]
        config: PathBuf,
        /// Corpus case id, or a directory with image.vgf and score_{c,s,a}.vgf
        #[arg(long)]
        case: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare majority voting and the network over the test split
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit the co-training fold plan
    Plan {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the receptive field and parameter count
    Rf {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check every gradient against finite differences
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let summary = match cli.command {
        Command::Gen { config } => cmd_gen(&RunConfig::load(&config)?)?.summary(),
        Command::Train { config, iterations, batch } => cmd_train(&RunConfig::load(&config)?, TrainOverrides { iterations, batch })?.summary(),
        Command::Fuse { config, case, checkpoint } => cmd_fuse(&RunConfig::load(&config)?, &case, checkpoint.as_deref())?.summary(),
        Command::Eval { config, checkpoint } => cmd_eval(&RunConfig::load(&config)?, checkpoint.as_deref())?.summary(),
        Command::Plan { config } => cmd_plan(&RunConfig::load(&config)?)?.summary(),
        Command::Rf { config } => {
            let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
            cmd_rf(cfg.as_ref())?.summary()
        }
        Command::Gradcheck { out } => {
            let res = cmd_gradcheck(out.as_deref())?;
            println!("{}", res.summary());
            return gradcheck_status(&res);
        }
    };
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    volfuse_core::runtime::retain_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(error::EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
