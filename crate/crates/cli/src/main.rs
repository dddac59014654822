//! `realm`: streaming speech recognition on synthetic audio.
//!
//! Any configuration key can be overridden on the command line as
//! `--key value`; those pairs are peeled off before clap sees the argument
//! list, so subcommands only declare their behavior flags.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

mod commands;
mod config;

use config::RunConfig;

/// Errors carry the process exit code: 1 usage, 2 data, 3 numeric.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<realm_core::Error> for CliError {
    fn from(e: realm_core::Error) -> Self {
        use realm_core::Error;
        let code = match &e {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(
    name = "realm",
    about = "Streaming decoder-only speech recognition on synthetic audio",
    after_help = "Any configuration key may be overridden as `--key value`, \
                  e.g. `--n_words 12 --mode speech_llm`."
)]
enum Cmd {
    /// Generate the synthetic corpus (train/dev/test splits).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite an existing non-empty data directory.
        #[arg(long)]
        force: bool,
        /// Regenerate afterwards and verify the corpus is byte-identical.
        #[arg(long)]
        verify: bool,
    },
    /// Print the interleaved training sample for one utterance.
    BuildTargets {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Utterance to dump, e.g. train-00042.
        #[arg(long)]
        utt: Option<String>,
        /// Dump the built-in worked six-word example instead of a corpus
        /// utterance and verify it against the expected sequences.
        #[arg(long)]
        paper_example: bool,
    },
    /// Train a model; checkpoints and a metrics log go to checkpoint_dir.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint in checkpoint_dir.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a split and score it.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split name (train/dev/test/long).
        #[arg(long, default_value = "test")]
        split: String,
        /// Beam width; mutually exclusive with --greedy.
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        /// Greedy decoding (the default).
        #[arg(long)]
        greedy: bool,
        /// Decode through the incremental streaming session.
        #[arg(long, conflicts_with_all = ["beam", "greedy"])]
        stream: bool,
        /// Pace streamed pushes at one chunk per chunk_ms of wall time.
        #[arg(long, requires = "stream")]
        realtime: bool,
        /// Print the per-duration-bucket WER table.
        #[arg(long)]
        buckets: bool,
    },
    /// Measure real-time factors and compare with the analytic cost model.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split to decode (smaller is faster).
        #[arg(long, default_value = "test")]
        split: String,
    },
}

/// Splits argv into clap arguments and `--key value` configuration
/// overrides. Only exact configuration keys are peeled off, so behavior
/// flags never collide with them.
fn split_overrides(argv: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut args = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        match arg.strip_prefix("--").filter(|k| RunConfig::is_key(k)) {
            Some(key) => {
                let value = argv.get(i + 1).ok_or_else(|| {
                    CliError::usage(format!("--{key} requires a value"))
                })?;
                overrides.push((key.to_string(), value.clone()));
                i += 2;
            }
            None => {
                args.push(arg.clone());
                i += 1;
            }
        }
    }
    Ok((args, overrides))
}

fn run() -> Result<(), CliError> {
    let argv: Vec<String> = std::env::args().collect();
    let (args, overrides) = split_overrides(&argv)?;
    let cmd = Cmd::try_parse_from(&args).map_err(|e| {
        // clap handles --help/--version by "erroring" with the text.
        if e.use_stderr() {
            CliError::usage(e.to_string())
        } else {
            print!("{e}");
            CliError { code: 0, message: String::new() }
        }
    })?;
    match cmd {
        Cmd::GenData { config, force, verify } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            commands::gen_data(&cfg, force, verify)
        }
        Cmd::BuildTargets { config, utt, paper_example } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            commands::build_targets(&cfg, utt.as_deref(), paper_example)
        }
        Cmd::Train { config, resume } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            commands::train(&cfg, resume)
        }
        Cmd::Decode { config, split, beam, greedy, stream, realtime, buckets } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            if let Some(0) = beam {
                return Err(CliError::usage("--beam must be at least 1"));
            }
            let mode = if stream {
                commands::DecodeMode::Stream { realtime }
            } else if let Some(width) = beam {
                commands::DecodeMode::Beam(width)
            } else {
                let _ = greedy;
                commands::DecodeMode::Greedy
            };
            commands::decode(&cfg, &split, mode, buckets)
        }
        Cmd::Bench { config, split } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            commands::bench(&cfg, &split)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.code != 0 {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.code)
        }
    }
}
