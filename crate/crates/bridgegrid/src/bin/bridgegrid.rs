//! bridgegrid CLI: rendezvous server, dataset generation, distributed
//! reconstruction runs, stream replay, benchmarking, and rendering.

fn main() {
    std::process::exit(bridgegrid::cli::main_entry());
}
