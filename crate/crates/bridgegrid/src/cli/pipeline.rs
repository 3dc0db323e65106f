//! Command implementations: the distributed run pipeline, streaming,
//! benchmarking, dataset generation, serving, and rendering.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::collectives::{Communicator, CounterSnapshot};
use crate::ptycho::{
    self, load_meta, read_complex_field, render_field, simulate_dataset, write_complex_field,
    write_dataset, ComplexField, DatasetMeta, DiffractionFrame, RealField, ScanPosition,
    SimulateSpec,
};
use crate::rendezvous::{search_contact_dir, server_start, Server, ServerConfig};
use crate::taskgrid::{
    run_mpi_stage, spawn_workers, write_replay_file, Dataset, MicroBatch, ReconstructResult,
    StageOptions, WorkerSpec,
};
use crate::wire::{Decoder, Encoder};

use super::config::PipelineConfig;
use super::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Locate the worker executable: `BRIDGEGRID_WORKER_BIN` or the sibling
/// `bridgegrid-worker` next to the current executable.
pub const ENV_WORKER_BIN: &str = "BRIDGEGRID_WORKER_BIN";

fn worker_bin_path() -> Result<PathBuf> {
    if let Ok(p) = std::env::var(ENV_WORKER_BIN) {
        return Ok(PathBuf::from(p));
    }
    let me = std::env::current_exe()
        .map_err(|e| CliError::runtime("IO", format!("cannot locate executable: {e}")))?;
    let sibling = me.with_file_name("bridgegrid-worker");
    if sibling.exists() {
        Ok(sibling)
    } else {
        Err(CliError::usage(
            "WORKER_BIN_NOT_FOUND",
            format!(
                "no bridgegrid-worker next to {}; set {ENV_WORKER_BIN}",
                me.display()
            ),
        ))
    }
}

/// One finished reconstruction run.
pub struct RunOutcome {
    pub workers: u32,
    pub final_error: f64,
    pub error_history: Vec<f64>,
    pub transport: CounterSnapshot,
    pub object: ComplexField,
    pub probe: ComplexField,
    pub wall_clock: Duration,
    pub dataset_dir: PathBuf,
    pub meta: DatasetMeta,
}

/// Resolve the dataset directory: an existing path or a generated one.
fn resolve_dataset(config: &PipelineConfig, out_dir: &Path) -> Result<PathBuf> {
    if let Some(path) = &config.data.path {
        if !path.join(ptycho::META_FILE).exists() {
            return Err(CliError {
                class: "DATA_NOT_FOUND".into(),
                message: format!("no dataset at {}", path.display()),
                exit_code: 2,
            });
        }
        return Ok(path.clone());
    }
    if let Some(spec) = &config.data.simulate {
        let dir = out_dir.join("dataset");
        let sim = simulate_dataset(spec)?;
        write_dataset(&dir, &sim)?;
        return Ok(dir);
    }
    Err(CliError {
        class: "DATA_NOT_FOUND".into(),
        message: "config needs data.path or data.simulate".into(),
        exit_code: 2,
    })
}

/// Run the full distributed pipeline: resolve data, provide a server,
/// spawn workers, reconstruct, and collect results.
pub fn run_pipeline(
    config: &PipelineConfig,
    out_dir: &Path,
    attach: bool,
    watchdog: Duration,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::runtime("IO", format!("cannot create {}: {e}", out_dir.display())))?;
    let dataset_dir = resolve_dataset(config, out_dir)?;
    let meta = load_meta(&dataset_dir)?;
    let workers = config.job.workers;

    // The driver owns the server unless told to attach elsewhere; the
    // server itself never launches anything.
    let mut owned_server: Option<Server> = None;
    let (server_addr, server_token) = if attach {
        let dir = config
            .server
            .contact_dir
            .clone()
            .unwrap_or_else(crate::rendezvous::default_contact_dir);
        let found = search_contact_dir(&dir);
        let contact = found.first().ok_or_else(|| {
            CliError::runtime(
                "NO_SERVER_FOUND",
                format!("no contact file under {}", dir.display()),
            )
        })?;
        (contact.addr(), contact.token.clone())
    } else {
        let contact_dir = config
            .server
            .contact_dir
            .clone()
            .unwrap_or_else(|| out_dir.join("contact"));
        let mut server_config = ServerConfig::new(contact_dir);
        if let Some(port) = config.server.port {
            server_config.bind = format!("127.0.0.1:{port}");
        }
        let server = server_start(&server_config)?;
        let addr = server.contact().addr();
        let token = server.contact().token.clone();
        owned_server = Some(server);
        (addr, token)
    };

    let solver = config.effective_solver();
    let params = serde_json::json!({
        "data_dir": dataset_dir.display().to_string(),
        "solver": solver,
    });
    let mut spec = WorkerSpec::new(worker_bin_path()?, "reconstruct", &placeholder_contact());
    spec.server_addr = server_addr;
    spec.server_token = server_token;

    let start = Instant::now();
    let set = spawn_workers(workers, &spec)?;
    let results = run_mpi_stage(
        &Dataset::empty(workers as usize),
        set,
        params,
        &StageOptions { watchdog },
    )?;
    let wall_clock = start.elapsed();

    let mut transport = CounterSnapshot::default();
    let mut object = None;
    let mut probe = None;
    let mut history = None;
    for raw in &results {
        let r = ReconstructResult::decode(raw)
            .map_err(|e| CliError::runtime("PROTOCOL", e.to_string()))?;
        transport = transport + r.counters;
        if r.rank == 0 {
            history = Some(r.error_history);
            object = r.object;
            probe = r.probe;
        }
    }
    let error_history =
        history.ok_or_else(|| CliError::runtime("PROTOCOL", "rank 0 returned no history"))?;
    let final_error = *error_history
        .last()
        .ok_or_else(|| CliError::runtime("PROTOCOL", "empty error history"))?;
    let object =
        object.ok_or_else(|| CliError::runtime("PROTOCOL", "rank 0 returned no object"))?;
    let probe = probe.ok_or_else(|| CliError::runtime("PROTOCOL", "rank 0 returned no probe"))?;

    // Check the server log for the suppressed-launch property before it
    // goes away with the run.
    if let Some(server) = &owned_server {
        let launches = server
            .action_log()
            .iter()
            .filter(|r| r.kind == crate::rendezvous::ActionKind::ProcessLaunch)
            .count();
        assert_eq!(launches, 0, "rendezvous server must never launch processes");
    }
    drop(owned_server);

    Ok(RunOutcome {
        workers,
        final_error,
        error_history,
        transport,
        object,
        probe,
        wall_clock,
        dataset_dir,
        meta,
    })
}

fn placeholder_contact() -> crate::rendezvous::ServerContactInfo {
    crate::rendezvous::ServerContactInfo {
        host: String::new(),
        port: 0,
        token: String::new(),
        contact_file_path: PathBuf::new(),
        pid: 0,
    }
}

fn write_outputs(outcome: &RunOutcome, config: &PipelineConfig, out_dir: &Path) -> Result<PathBuf> {
    write_complex_field(&out_dir.join("object.bin"), &outcome.object)?;
    write_complex_field(&out_dir.join("probe.bin"), &outcome.probe)?;
    render_field(&out_dir.join("object"), &outcome.object)?;
    render_field(&out_dir.join("probe"), &outcome.probe)?;

    let report = serde_json::json!({
        "schema_version": 1,
        "command": "run",
        "algorithm": config.solver.algorithm,
        "allreduce_variant": config.allreduce_variant(),
        "workers": outcome.workers,
        "iterations": outcome.error_history.len(),
        "final_error": outcome.final_error,
        "error_history": outcome.error_history,
        "transport": outcome.transport,
        "wall_clock_seconds": outcome.wall_clock.as_secs_f64(),
        "dataset": {
            "path": outcome.dataset_dir.display().to_string(),
            "frames": outcome.meta.frames,
            "object": [outcome.meta.object_width, outcome.meta.object_height],
            "probe": [outcome.meta.probe_width, outcome.meta.probe_height],
        },
        "outputs": {
            "object": "object.bin",
            "probe": "probe.bin",
            "object_amp": "object_amp.pgm",
            "object_phase": "object_phase.pgm",
            "probe_amp": "probe_amp.pgm",
            "probe_phase": "probe_phase.pgm",
        },
    });
    let path = out_dir.join("report.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&report).unwrap())
        .map_err(|e| CliError::runtime("IO", e.to_string()))?;
    Ok(path)
}

pub fn cmd_run(
    config_path: &Path,
    out_dir: &Path,
    attach: bool,
    workers_override: Option<u32>,
    watchdog_secs: u64,
) -> Result<()> {
    let mut config = PipelineConfig::load(config_path)?;
    if let Some(w) = workers_override {
        config.job.workers = w;
        config.validate()?;
    }
    let outcome = run_pipeline(&config, out_dir, attach, Duration::from_secs(watchdog_secs))?;
    let report_path = write_outputs(&outcome, &config, out_dir)?;
    println!(
        "run complete: workers={} iterations={} final_error={:.3e} wall={:.2}s report={}",
        outcome.workers,
        outcome.error_history.len(),
        outcome.final_error,
        outcome.wall_clock.as_secs_f64(),
        report_path.display()
    );
    Ok(())
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn stop_handler(_sig: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

pub fn cmd_serve(contact_dir: &Path, port: u16, cluster_id: Option<String>) -> Result<()> {
    let mut config = ServerConfig::new(contact_dir);
    config.bind = format!("127.0.0.1:{port}");
    config.cluster_id = cluster_id;
    unsafe {
        libc::signal(libc::SIGINT, stop_handler as *const () as libc::sighandler_t);
        libc::signal(libc::SIGTERM, stop_handler as *const () as libc::sighandler_t);
    }
    let mut server = server_start(&config)?;
    println!("{}", server.contact().contact_file_path.display());
    while !STOP.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    server.shutdown();
    Ok(())
}

/// Frame record layout used on streams: frame index, scan offset, shape,
/// then the raw little-endian intensities.
pub fn encode_frame_record(pos: &ScanPosition, frame: &DiffractionFrame) -> Vec<u8> {
    let mut enc = Encoder::new()
        .u32(pos.j as u32)
        .i64(pos.x as i64)
        .i64(pos.y as i64)
        .u32(frame.intensity.width as u32)
        .u32(frame.intensity.height as u32);
    let mut raw = Vec::with_capacity(frame.intensity.data.len() * 8);
    for v in &frame.intensity.data {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    enc = enc.bytes(&raw);
    enc.finish()
}

pub fn decode_frame_record(raw: &[u8]) -> Result<(ScanPosition, DiffractionFrame)> {
    let bad = |_| CliError::runtime("STREAM_FORMAT", "malformed frame record");
    let mut d = Decoder::new(raw);
    let j = d.u32().map_err(bad)? as usize;
    let x = d.i64().map_err(bad)? as i32;
    let y = d.i64().map_err(bad)? as i32;
    let width = d.u32().map_err(bad)? as usize;
    let height = d.u32().map_err(bad)? as usize;
    let bytes = d.bytes().map_err(bad)?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.len() != width * height {
        return Err(CliError::runtime("STREAM_FORMAT", "frame record size mismatch"));
    }
    let frame = DiffractionFrame::new(
        j,
        RealField {
            width,
            height,
            data,
        },
    )?;
    Ok((ScanPosition::new(j, x, y), frame))
}

pub fn cmd_simulate(
    spec: SimulateSpec,
    out_dir: &Path,
    stream_replay: Option<&Path>,
    stream_batches: usize,
) -> Result<()> {
    let sim = simulate_dataset(&spec)?;
    write_dataset(out_dir, &sim)?;
    println!(
        "dataset written: {} frames of {}x{} over a {}x{} object at {}",
        sim.frames.len(),
        spec.probe_size,
        spec.probe_size,
        spec.object_size,
        spec.object_size,
        out_dir.display()
    );

    if let Some(replay_path) = stream_replay {
        if stream_batches == 0 {
            return Err(CliError::usage("CONFIG", "stream-batches must be at least 1"));
        }
        let per_batch = sim.frames.len().div_ceil(stream_batches);
        let mut batches = Vec::new();
        for b in 0..stream_batches {
            let lo = (b * per_batch).min(sim.frames.len());
            let hi = ((b + 1) * per_batch).min(sim.frames.len());
            let records: Vec<Vec<u8>> = (lo..hi)
                .map(|i| encode_frame_record(&sim.positions[i], &sim.frames[i]))
                .collect();
            let mut topics = std::collections::BTreeMap::new();
            topics.insert("frames".to_string(), records);
            batches.push(MicroBatch {
                batch_index: b as u64,
                topics,
            });
        }
        write_replay_file(replay_path, &batches)?;
        println!(
            "stream replay written: {} batches at {}",
            stream_batches,
            replay_path.display()
        );
    }
    Ok(())
}

pub fn cmd_stream(config_path: &Path, out_dir: &Path) -> Result<()> {
    let config = PipelineConfig::load(config_path)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::runtime("IO", e.to_string()))?;
    let replay = config
        .stream
        .replay
        .clone()
        .ok_or_else(|| CliError::config("stream.replay is required for the stream command"))?;
    let dataset_dir = resolve_dataset(&config, out_dir)?;
    let meta = load_meta(&dataset_dir)?;
    let interval = Duration::from_millis(config.stream.interval_ms.unwrap_or(0));
    let solver = config.effective_solver();

    let source = crate::taskgrid::StreamSource::Replay {
        path: replay,
        interval,
    };
    let mut entries = Vec::new();
    let report = crate::taskgrid::stream_run(&source, |batch_index, dataset| {
        let t0 = Instant::now();
        let mut frames = Vec::new();
        let mut positions = Vec::new();
        for record in dataset.collect() {
            let (pos, frame) = decode_frame_record(&record).map_err(|e| e.to_string())?;
            positions.push(pos);
            frames.push(frame);
        }
        let comm = Communicator::solo().map_err(|e| e.to_string())?;
        let state = ptycho::reconstruct(
            &frames,
            &positions,
            (meta.probe_width, meta.probe_height),
            (meta.object_width, meta.object_height),
            &solver,
            &comm,
        )
        .map_err(|e| e.to_string())?;
        let final_error = state.error_history.last().copied().unwrap_or(0.0);
        entries.push(serde_json::json!({
            "batch_index": batch_index,
            "frames": frames.len(),
            "iterations": state.error_history.len(),
            "final_error": final_error,
            "wall_clock_seconds": t0.elapsed().as_secs_f64(),
        }));
        println!(
            "batch {batch_index}: {} frames, final_error={final_error:.3e}",
            frames.len()
        );
        Ok(())
    })?;

    let stream_report = serde_json::json!({
        "schema_version": 1,
        "command": "stream",
        "batches": entries,
        "summaries": report.batches,
    });
    let path = out_dir.join("stream_report.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&stream_report).unwrap())
        .map_err(|e| CliError::runtime("IO", e.to_string()))?;
    println!("stream complete: {} batches, report={}", report.batches.len(), path.display());
    Ok(())
}

pub fn cmd_bench(config_path: &Path, out_dir: &Path, worker_counts: &[u32]) -> Result<()> {
    let base = PipelineConfig::load(config_path)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::runtime("IO", e.to_string()))?;
    let mut rows = Vec::new();
    for &n in worker_counts {
        let mut config = base.clone();
        config.job.workers = n;
        let sub = out_dir.join(format!("bench-w{n}"));
        let outcome = run_pipeline(&config, &sub, false, Duration::from_secs(600))?;
        rows.push((n, outcome.wall_clock.as_secs_f64(), outcome.transport));
    }

    // Table-I layout: application row, one column per worker count.
    let header: Vec<String> = rows.iter().map(|(n, _, _)| n.to_string()).collect();
    println!("Time (s) vs Number of Workers");
    println!("| {:24} | {} |", "Application", header.join(" | "));
    let times: Vec<String> = rows.iter().map(|(_, t, _)| format!("{t:.2}")).collect();
    println!("| {:24} | {} |", "bridgegrid-ptycho", times.join(" | "));
    let traffic: Vec<String> = rows
        .iter()
        .map(|(_, _, c)| format!("{:.1}", (c.bytes_sent as f64) / 1.0e6))
        .collect();
    println!("| {:24} | {} |", "traffic (MB sent)", traffic.join(" | "));

    let report = serde_json::json!({
        "schema_version": 1,
        "command": "bench",
        "rows": rows.iter().map(|(n, t, c)| serde_json::json!({
            "workers": n,
            "wall_clock_seconds": t,
            "transport": c,
        })).collect::<Vec<_>>(),
    });
    let path = out_dir.join("bench.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&report).unwrap())
        .map_err(|e| CliError::runtime("IO", e.to_string()))?;
    println!("bench report={}", path.display());
    Ok(())
}

pub fn cmd_render(input: &Path, width: usize, height: usize, out_prefix: &Path) -> Result<()> {
    if !input.exists() {
        return Err(CliError {
            class: "DATA_NOT_FOUND".into(),
            message: format!("no field file at {}", input.display()),
            exit_code: 2,
        });
    }
    let field = read_complex_field(input, width, height)?;
    let (amp, phase) = render_field(out_prefix, &field)?;
    println!("rendered {} and {}", amp.display(), phase.display());
    Ok(())
}
