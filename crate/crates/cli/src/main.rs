use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zj_cli::{cmd_eval, cmd_inspect, cmd_merge, cmd_plan, cmd_train, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "zj", version, about = "Adapt, tune and merge small pre-trained models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the adaptation plan for architect.config.
    Plan(Common),
    /// Train and write final.zjk1, history.jsonl and resolved.cfg.
    Train(Common),
    /// Merge the --ckpt inputs into merged.zjk1 with a merge_report.json.
    Merge(Common),
    /// Evaluate one checkpoint or an ensemble of them.
    Eval(Common),
    /// Dump checkpoint paths, shapes and norms.
    Inspect {
        #[arg(long = "ckpt", required = true)]
        ckpt: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "ckpt")]
    ckpt: Vec<PathBuf>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::file(p, e.into()))?;
                RunConfig::parse(&text).map_err(|e| CliError::file(p, e))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set("seed", s.to_string())?;
        }
        if let Some(o) = &self.out {
            cfg.set("out_dir", o.display().to_string())?;
        }
        if !self.ckpt.is_empty() {
            let list: Vec<String> = self.ckpt.iter().map(|p| p.display().to_string()).collect();
            cfg.set("inputs", list.join(","))?;
        }
        Ok(cfg)
    }
}

fn init_logging() {
    let level = match std::env::var("ZJ_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.cmd {
        Cmd::Plan(c) => cmd_plan(&c.load()?),
        Cmd::Train(c) => cmd_train(&c.load()?),
        Cmd::Merge(c) => cmd_merge(&c.load()?),
        Cmd::Eval(c) => cmd_eval(&c.load()?),
        Cmd::Inspect { ckpt } => cmd_inspect(&ckpt),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(9)
        }
    }
}
