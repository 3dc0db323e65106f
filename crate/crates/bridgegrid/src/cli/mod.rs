//! Command-line orchestration: serve the rendezvous, simulate datasets,
//! run distributed reconstructions, replay streams, benchmark worker
//! counts, and render fields.
//!
//! Exit codes: 0 success, 2 usage or configuration errors, 3 runtime
//! failures. Failures print a one-line machine-readable JSON object to
//! stderr: `{"error_class": "...", "message": "..."}`.

mod config;
mod pipeline;

pub use config::{DataSection, JobSection, PipelineConfig, ServerSection, StreamSection};
pub use pipeline::{
    decode_frame_record, encode_frame_record, run_pipeline, RunOutcome,
};

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// A CLI failure carrying its exit code and machine-readable class.
#[derive(Debug)]
pub struct CliError {
    pub class: String,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            class: "CONFIG".into(),
            message: message.into(),
            exit_code: 2,
        }
    }

    pub fn usage(class: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            class: class.into(),
            message: message.into(),
            exit_code: 2,
        }
    }

    pub fn runtime(class: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            class: class.into(),
            message: message.into(),
            exit_code: 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.class, self.message)
    }
}

impl From<crate::taskgrid::TaskError> for CliError {
    fn from(e: crate::taskgrid::TaskError) -> Self {
        CliError::runtime(e.class(), e.to_string())
    }
}

impl From<crate::rendezvous::RendezvousError> for CliError {
    fn from(e: crate::rendezvous::RendezvousError) -> Self {
        CliError::runtime(e.class(), e.to_string())
    }
}

impl From<crate::ptycho::PtychoError> for CliError {
    fn from(e: crate::ptycho::PtychoError) -> Self {
        // A missing dataset is a usage problem, not a runtime fault.
        let code = match &e {
            crate::ptycho::PtychoError::DataNotFound(_) => 2,
            _ => 3,
        };
        CliError {
            class: e.class().to_string(),
            message: e.to_string(),
            exit_code: code,
        }
    }
}

impl From<crate::collectives::CollectiveError> for CliError {
    fn from(e: crate::collectives::CollectiveError) -> Self {
        CliError::runtime(e.class(), e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "bridgegrid", version)]
#[command(about = "PMI-style rendezvous runtime with a distributed ptychography pipeline")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a rendezvous server, print its contact file path, and block
    /// until interrupted.
    Serve {
        #[arg(long)]
        contact_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long)]
        cluster_id: Option<String>,
    },
    /// Write a synthetic dataset directory (and optionally a stream
    /// replay file derived from it).
    Simulate {
        #[arg(long, default_value_t = 25)]
        frames: usize,
        #[arg(long, default_value_t = 16)]
        probe_size: usize,
        #[arg(long, default_value_t = 64)]
        object_size: usize,
        #[arg(long, default_value_t = 6)]
        step: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a micro-batch replay file covering the frames.
        #[arg(long)]
        stream_replay: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        stream_batches: usize,
    },
    /// Run a distributed reconstruction per the pipeline config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attach to an already-running server instead of starting one.
        #[arg(long)]
        attach: bool,
        /// Override job.workers.
        #[arg(long)]
        workers: Option<u32>,
        /// Stage watchdog in seconds.
        #[arg(long, default_value_t = 600)]
        watchdog_secs: u64,
    },
    /// Replay a micro-batch stream, reconstructing per batch.
    Stream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the reconstruction at several worker counts and tabulate
    /// wall-clock time and traffic.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u32, 2, 4])]
        workers: Vec<u32>,
    },
    /// Convert a raw complex field file to amplitude and phase PGMs.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        out_prefix: PathBuf,
    },
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve {
            contact_dir,
            port,
            cluster_id,
        } => pipeline::cmd_serve(&contact_dir, port, cluster_id),
        Command::Simulate {
            frames,
            probe_size,
            object_size,
            step,
            seed,
            out,
            stream_replay,
            stream_batches,
        } => pipeline::cmd_simulate(
            crate::ptycho::SimulateSpec {
                frames,
                probe_size,
                object_size,
                step,
                seed,
            },
            &out,
            stream_replay.as_deref(),
            stream_batches,
        ),
        Command::Run {
            config,
            out,
            attach,
            workers,
            watchdog_secs,
        } => pipeline::cmd_run(&config, &out, attach, workers, watchdog_secs),
        Command::Stream { config, out } => pipeline::cmd_stream(&config, &out),
        Command::Bench {
            config,
            out,
            workers,
        } => pipeline::cmd_bench(&config, &out, &workers),
        Command::Render {
            input,
            width,
            height,
            out_prefix,
        } => pipeline::cmd_render(&input, width, height, &out_prefix),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({
                "error_class": e.class,
                "message": e.message,
            });
            eprintln!("{line}");
            e.exit_code
        }
    }
}
