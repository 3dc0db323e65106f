//! Worker executable: launched by the driver (never by the rendezvous
//! server), it reports to the stage socket, attaches to the rendezvous
//! server named in its environment, and runs the requested stage.

use clap::Parser;

#[derive(Parser)]
#[command(name = "bridgegrid-worker", version)]
#[command(about = "bridgegrid stage worker; expects the PMI environment contract")]
struct Args {
    /// Name of the stage to execute.
    #[arg(long)]
    stage: String,
}

fn main() {
    let args = Args::parse();
    std::process::exit(bridgegrid::taskgrid::worker_main(&args.stage));
}
