//! Rendezvous contract self-test: thirty cases covering key-value
//! visibility, fence semantics, connect agreement and tagging, laggard
//! and cached event delivery, timeouts, disconnect ordering, and failure
//! reporting. Each case runs as the `conf` worker stage across real OS
//! processes; the driver-side expectations live in [`cases`].

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::rendezvous::{
    AttachOptions, ConnectRequest, EventKind, EventSubject, Namespace, RendezvousError, Session,
};
use crate::taskgrid::{StageContext, StageError, StageResult, TaskError};
use crate::wire::{Decoder, Encoder};

/// What the driver should see after running a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseExpect {
    AllOk,
    WorkerFailed { worker_id: u32 },
}

/// Driver-side validation over the collected per-rank payloads.
pub type CheckFn = fn(size: u32, results: &[Vec<u8>]) -> Result<(), String>;

pub struct ConformanceCase {
    pub name: &'static str,
    pub expect: CaseExpect,
    pub check: Option<CheckFn>,
}

/// The full suite, in execution order.
pub fn cases() -> &'static [ConformanceCase] {
    const ALL_OK: CaseExpect = CaseExpect::AllOk;
    const FAIL_1: CaseExpect = CaseExpect::WorkerFailed { worker_id: 1 };
    &[
        ConformanceCase { name: "put-selfget", expect: ALL_OK, check: None },
        ConformanceCase { name: "peer-get-hidden", expect: ALL_OK, check: None },
        ConformanceCase { name: "put-fence-get", expect: ALL_OK, check: None },
        ConformanceCase { name: "double-put-last-wins", expect: ALL_OK, check: None },
        ConformanceCase { name: "reput-after-commit", expect: ALL_OK, check: None },
        ConformanceCase { name: "get-unknown-ns", expect: ALL_OK, check: None },
        ConformanceCase { name: "get-missing-key", expect: ALL_OK, check: None },
        ConformanceCase { name: "get-rank-out-of-range", expect: ALL_OK, check: None },
        ConformanceCase { name: "fence-atomicity-stress", expect: ALL_OK, check: None },
        ConformanceCase { name: "empty-and-binary-values", expect: ALL_OK, check: None },
        ConformanceCase { name: "connect-all-agree", expect: ALL_OK, check: Some(check_connect_agree) },
        ConformanceCase { name: "connect-self-groups", expect: ALL_OK, check: Some(check_distinct_namespaces) },
        ConformanceCase { name: "connect-overlapping-tags", expect: ALL_OK, check: Some(check_overlapping_tags) },
        ConformanceCase { name: "connect-subset", expect: ALL_OK, check: Some(check_subset_pair) },
        ConformanceCase { name: "connect-repeat-distinct", expect: ALL_OK, check: Some(check_repeat_distinct) },
        ConformanceCase { name: "connect-timeout", expect: ALL_OK, check: Some(check_timeout_elapsed) },
        ConformanceCase { name: "connect-timeout-satisfied", expect: ALL_OK, check: None },
        ConformanceCase { name: "laggard-notified", expect: ALL_OK, check: None },
        ConformanceCase { name: "cached-event-on-attach", expect: ALL_OK, check: None },
        ConformanceCase { name: "first-caller-never-notified", expect: ALL_OK, check: None },
        ConformanceCase { name: "group-ready-event", expect: ALL_OK, check: None },
        ConformanceCase { name: "handler-unregister", expect: ALL_OK, check: None },
        ConformanceCase { name: "handler-sequential-order", expect: ALL_OK, check: None },
        ConformanceCase { name: "disconnect-all", expect: ALL_OK, check: None },
        ConformanceCase { name: "disconnect-nonmember", expect: ALL_OK, check: None },
        ConformanceCase { name: "disconnect-waits-inflight", expect: ALL_OK, check: None },
        ConformanceCase { name: "finalize-fails-waiting-fence", expect: ALL_OK, check: None },
        ConformanceCase { name: "crash-mid-fence", expect: FAIL_1, check: None },
        ConformanceCase { name: "crash-monotonic", expect: FAIL_1, check: None },
        ConformanceCase { name: "attach-error-paths", expect: ALL_OK, check: None },
    ]
}

/// Worker-side dispatch for the `conf` stage; `params.case` names the
/// case to run.
pub fn stage_conformance(ctx: &mut StageContext) -> StageResult {
    let case = ctx.params["case"]
        .as_str()
        .ok_or_else(|| StageError::new("INVALID_CONFIG", "missing case name"))?
        .to_string();
    match case.as_str() {
        "put-selfget" => case_put_selfget(ctx),
        "peer-get-hidden" => case_peer_get_hidden(ctx),
        "put-fence-get" => case_put_fence_get(ctx),
        "double-put-last-wins" => case_double_put_last_wins(ctx),
        "reput-after-commit" => case_reput_after_commit(ctx),
        "get-unknown-ns" => case_get_unknown_ns(ctx),
        "get-missing-key" => case_get_missing_key(ctx),
        "get-rank-out-of-range" => case_get_rank_out_of_range(ctx),
        "fence-atomicity-stress" => case_fence_atomicity_stress(ctx),
        "empty-and-binary-values" => case_empty_and_binary_values(ctx),
        "connect-all-agree" => case_connect_all_agree(ctx),
        "connect-self-groups" => case_connect_self_groups(ctx),
        "connect-overlapping-tags" => case_connect_overlapping_tags(ctx),
        "connect-subset" => case_connect_subset(ctx),
        "connect-repeat-distinct" => case_connect_repeat_distinct(ctx),
        "connect-timeout" => case_connect_timeout(ctx),
        "connect-timeout-satisfied" => case_connect_timeout_satisfied(ctx),
        "laggard-notified" => case_laggard_notified(ctx),
        "cached-event-on-attach" => case_cached_event_on_attach(ctx),
        "first-caller-never-notified" => case_first_caller_never_notified(ctx),
        "group-ready-event" => case_group_ready_event(ctx),
        "handler-unregister" => case_handler_unregister(ctx),
        "handler-sequential-order" => case_handler_sequential_order(ctx),
        "disconnect-all" => case_disconnect_all(ctx),
        "disconnect-nonmember" => case_disconnect_nonmember(ctx),
        "disconnect-waits-inflight" => case_disconnect_waits_inflight(ctx),
        "finalize-fails-waiting-fence" => case_finalize_fails_waiting_fence(ctx),
        "crash-mid-fence" => case_crash_mid_fence(ctx),
        "crash-monotonic" => case_crash_monotonic(ctx),
        "attach-error-paths" => case_attach_error_paths(ctx),
        other => Err(StageError::new(
            "INVALID_CONFIG",
            format!("unknown conformance case {other:?}"),
        )),
    }
}

// -------------------------------------------------------------------
// helpers
// -------------------------------------------------------------------

fn ensure(cond: bool, message: impl Into<String>) -> Result<(), StageError> {
    if cond {
        Ok(())
    } else {
        Err(StageError::new("CASE_ASSERT", message))
    }
}

fn expect_class<T: std::fmt::Debug>(
    result: Result<T, RendezvousError>,
    class: &str,
) -> Result<(), StageError> {
    match result {
        Err(e) if e.class() == class => Ok(()),
        Err(e) => Err(StageError::new(
            "CASE_ASSERT",
            format!("expected {class}, got {} ({e})", e.class()),
        )),
        Ok(v) => Err(StageError::new(
            "CASE_ASSERT",
            format!("expected {class}, got success {v:?}"),
        )),
    }
}

fn wait_for(deadline: Duration, mut probe: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + deadline;
    while Instant::now() < end {
        if probe() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    probe()
}

/// Count of CONNECT_REQUESTED events whose request carries `tag`.
fn tagged_counter(session: &Session, tag: &str) -> Arc<AtomicUsize> {
    let counter = Arc::new(AtomicUsize::new(0));
    let c = Arc::clone(&counter);
    let tag = tag.to_string();
    session.register_event_handler(EventKind::ConnectRequested, move |ev| {
        if let EventSubject::Connect(req) = &ev.subject {
            if req.tag.as_deref() == Some(tag.as_str()) {
                c.fetch_add(1, Ordering::SeqCst);
            }
        }
    });
    counter
}

fn all_participants(session: &Session, size: u32) -> Vec<crate::rendezvous::ProcessId> {
    (0..size).map(|r| session.peer(r)).collect()
}

fn ok() -> StageResult {
    Ok(Vec::new())
}

// -------------------------------------------------------------------
// key-value and fence cases
// -------------------------------------------------------------------

fn case_put_selfget(ctx: &mut StageContext) -> StageResult {
    let rank = ctx.rank;
    let s = ctx.session()?;
    let value = format!("v{rank}");
    s.put("k", value.as_bytes())?;
    let got = s.get(&s.peer(rank), "k")?;
    ensure(got == value.as_bytes(), "self-get sees own uncommitted put")?;
    ok()
}

fn case_peer_get_hidden(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?;
    s.put("k", b"hidden")?;
    let peer = s.peer((rank + 1) % size);
    expect_class(s.get(&peer, "k"), "KEY_NOT_VISIBLE")?;
    ok()
}

fn case_put_fence_get(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?;
    s.put("endpoint", format!("addr-{rank}").as_bytes())?;
    s.fence()?;
    for r in 0..size {
        let got = s.get(&s.peer(r), "endpoint")?;
        ensure(
            got == format!("addr-{r}").as_bytes(),
            format!("rank {rank} sees rank {r}'s endpoint after fence"),
        )?;
    }
    ok()
}

fn case_double_put_last_wins(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?;
    s.put("k", b"first")?;
    s.put("k", b"second")?;
    s.fence()?;
    let got = s.get(&s.peer((rank + 1) % size), "k")?;
    ensure(got == b"second", "second put wins after fence")?;
    ok()
}

fn case_reput_after_commit(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?;
    let peer = s.peer((rank + 1) % size);
    s.put("k", b"v1")?;
    s.fence()?;
    s.put("k", b"v2")?;
    // The next epoch cannot have completed yet (this rank has not called
    // fence), so the committed copy is still v1.
    ensure(s.get(&peer, "k")? == b"v1", "committed value immutable before next fence")?;
    s.fence()?;
    ensure(s.get(&peer, "k")? == b"v2", "re-put visible after next fence")?;
    ok()
}

fn case_get_unknown_ns(ctx: &mut StageContext) -> StageResult {
    let s = ctx.session()?;
    let ghost = crate::rendezvous::ProcessId::new(Namespace::new("no-such-job").unwrap(), 0);
    expect_class(s.get(&ghost, "k"), "UNKNOWN_PROCESS")?;
    ok()
}

fn case_get_missing_key(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?;
    s.fence()?;
    expect_class(
        s.get(&s.peer((rank + 1) % size), "never-put"),
        "KEY_NOT_VISIBLE",
    )?;
    ok()
}

fn case_get_rank_out_of_range(ctx: &mut StageContext) -> StageResult {
    let size = ctx.size;
    let s = ctx.session()?;
    expect_class(s.get(&s.peer(size + 7), "k"), "UNKNOWN_PROCESS")?;
    ok()
}

fn case_fence_atomicity_stress(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let keys = 5u32;
    let s = ctx.session()?;
    for k in 0..keys {
        s.put(&format!("k{k}"), format!("{rank}.{k}").as_bytes())?;
        if (rank + k) % 3 == 0 {
            std::thread::sleep(Duration::from_millis(2));
        }
    }
    s.fence()?;
    for owner in 0..size {
        for k in 0..keys {
            let got = s.get(&s.peer(owner), &format!("k{k}"))?;
            ensure(
                got == format!("{owner}.{k}").as_bytes(),
                "every pre-fence put is visible after own fence returns",
            )?;
        }
    }
    ok()
}

fn case_empty_and_binary_values(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?;
    let binary: Vec<u8> = vec![0, 255, 0, 7, 0];
    s.put("empty", b"")?;
    s.put("binary", &binary)?;
    s.fence()?;
    let peer = s.peer((rank + 1) % size);
    ensure(s.get(&peer, "empty")?.is_empty(), "empty value round-trips")?;
    ensure(s.get(&peer, "binary")? == binary, "binary value round-trips")?;
    ok()
}

// -------------------------------------------------------------------
// connect cases
// -------------------------------------------------------------------

fn case_connect_all_agree(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?;
    s.put("endpoint", format!("ep-{rank}").as_bytes())?;
    s.fence()?;
    let info = s.connect(&ConnectRequest::new(all_participants(s, size)).with_tag("agree"))?;
    ensure(
        info.rank_in_group == rank,
        "rank in group equals sorted participant index",
    )?;
    let mut digest = Vec::new();
    for p in &info.participants {
        digest.extend_from_slice(p.namespace.qualified().as_bytes());
        digest.extend_from_slice(&p.rank.to_be_bytes());
        digest.extend_from_slice(info.endpoints.get(p).map(Vec::as_slice).unwrap_or(b"-"));
    }
    Ok(Encoder::new()
        .str(&info.group.qualified())
        .u32(info.rank_in_group)
        .bytes(&digest)
        .finish())
}

fn check_connect_agree(size: u32, results: &[Vec<u8>]) -> Result<(), String> {
    let mut first: Option<(String, Vec<u8>)> = None;
    for (rank, raw) in results.iter().enumerate() {
        let mut d = Decoder::new(raw);
        let ns = d.str().map_err(|e| e.to_string())?;
        let rank_in_group = d.u32().map_err(|e| e.to_string())?;
        let digest = d.bytes().map_err(|e| e.to_string())?;
        if rank_in_group != rank as u32 {
            return Err(format!("rank {rank} got group rank {rank_in_group}"));
        }
        match &first {
            None => first = Some((ns, digest)),
            Some((ns0, digest0)) => {
                if ns != *ns0 {
                    return Err(format!("group namespaces differ: {ns0} vs {ns}"));
                }
                if digest != *digest0 {
                    return Err("endpoint tables differ between ranks".to_string());
                }
            }
        }
    }
    let _ = size;
    Ok(())
}

fn case_connect_self_groups(ctx: &mut StageContext) -> StageResult {
    let rank = ctx.rank;
    let s = ctx.session()?;
    let info = s.connect(&ConnectRequest::new(vec![s.peer(rank)]))?;
    ensure(info.rank_in_group == 0, "self group rank is zero")?;
    Ok(Encoder::new().str(&info.group.qualified()).finish())
}

fn check_distinct_namespaces(_size: u32, results: &[Vec<u8>]) -> Result<(), String> {
    let mut seen = std::collections::HashSet::new();
    for raw in results {
        let mut d = Decoder::new(raw);
        let ns = d.str().map_err(|e| e.to_string())?;
        if !seen.insert(ns.clone()) {
            return Err(format!("group namespace {ns} assigned twice"));
        }
    }
    Ok(())
}

fn case_connect_overlapping_tags(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?.clone();
    let participants = all_participants(&s, size);
    let req_a = ConnectRequest::new(participants.clone()).with_tag("a");
    let req_b = ConnectRequest::new(participants).with_tag("b");
    // Odd ranks issue b first so completion requires true concurrency.
    let (first, second) = if rank % 2 == 0 {
        (req_a.clone(), req_b.clone())
    } else {
        (req_b.clone(), req_a.clone())
    };
    let s1 = s.clone();
    let t = std::thread::spawn(move || s1.connect(&first));
    std::thread::sleep(Duration::from_millis(10));
    let second_info = s.connect(&second)?;
    let first_info = t.join().expect("connect thread")?;
    let (ns_a, ns_b) = if rank % 2 == 0 {
        (first_info.group, second_info.group)
    } else {
        (second_info.group, first_info.group)
    };
    ensure(ns_a != ns_b, "tags a and b never unify")?;
    Ok(Encoder::new()
        .str(&ns_a.qualified())
        .str(&ns_b.qualified())
        .finish())
}

fn check_overlapping_tags(_size: u32, results: &[Vec<u8>]) -> Result<(), String> {
    let mut expected: Option<(String, String)> = None;
    for raw in results {
        let mut d = Decoder::new(raw);
        let a = d.str().map_err(|e| e.to_string())?;
        let b = d.str().map_err(|e| e.to_string())?;
        match &expected {
            None => expected = Some((a, b)),
            Some((ea, eb)) => {
                if a != *ea || b != *eb {
                    return Err("tagged groups differ across ranks".to_string());
                }
            }
        }
    }
    Ok(())
}

fn case_connect_subset(ctx: &mut StageContext) -> StageResult {
    let (rank, _size) = (ctx.rank, ctx.size);
    if rank >= 2 {
        return ok();
    }
    let s = ctx.session()?;
    let pair = vec![s.peer(0), s.peer(1)];
    let info = s.connect(&ConnectRequest::new(pair).with_tag("sub"))?;
    Ok(Encoder::new().str(&info.group.qualified()).finish())
}

fn check_subset_pair(_size: u32, results: &[Vec<u8>]) -> Result<(), String> {
    let ns: Vec<String> = results[..2]
        .iter()
        .map(|raw| Decoder::new(raw).str().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if ns[0] != ns[1] {
        return Err("pair participants disagree on group namespace".to_string());
    }
    Ok(())
}

fn case_connect_repeat_distinct(ctx: &mut StageContext) -> StageResult {
    let size = ctx.size;
    let s = ctx.session()?;
    let req = ConnectRequest::new(all_participants(s, size)).with_tag("r");
    let first = s.connect(&req)?;
    let second = s.connect(&req)?;
    ensure(
        first.group != second.group,
        "sequential identical requests get fresh namespaces",
    )?;
    Ok(Encoder::new()
        .str(&first.group.qualified())
        .str(&second.group.qualified())
        .finish())
}

fn check_repeat_distinct(_size: u32, results: &[Vec<u8>]) -> Result<(), String> {
    let mut expected: Option<(String, String)> = None;
    for raw in results {
        let mut d = Decoder::new(raw);
        let a = d.str().map_err(|e| e.to_string())?;
        let b = d.str().map_err(|e| e.to_string())?;
        match &expected {
            None => expected = Some((a, b)),
            Some((ea, eb)) => {
                if a != *ea || b != *eb {
                    return Err("repeat connect namespaces differ across ranks".to_string());
                }
            }
        }
    }
    Ok(())
}

fn case_connect_timeout(ctx: &mut StageContext) -> StageResult {
    let rank = ctx.rank;
    if rank == 0 {
        let s = ctx.session()?;
        let req = ConnectRequest::new(vec![s.peer(0), s.peer(1)])
            .with_tag("to")
            .with_timeout(Duration::from_millis(100));
        let start = Instant::now();
        expect_class(s.connect(&req), "TIMEOUT")?;
        let elapsed = start.elapsed();
        ensure(
            elapsed >= Duration::from_millis(100),
            format!("timeout fired early after {elapsed:?}"),
        )?;
        return Ok(Encoder::new().u64(elapsed.as_millis() as u64).finish());
    }
    if rank == 1 {
        // Never joins; just outlives the timeout window.
        std::thread::sleep(Duration::from_millis(400));
    }
    Ok(Encoder::new().u64(0).finish())
}

fn check_timeout_elapsed(_size: u32, results: &[Vec<u8>]) -> Result<(), String> {
    let mut d = Decoder::new(&results[0]);
    let ms = d.u64().map_err(|e| e.to_string())?;
    if !(100..5000).contains(&ms) {
        return Err(format!("timeout latency {ms} ms outside [100 ms, 5 s)"));
    }
    Ok(())
}

fn case_connect_timeout_satisfied(ctx: &mut StageContext) -> StageResult {
    let size = ctx.size;
    let s = ctx.session()?;
    let req = ConnectRequest::new(all_participants(s, size))
        .with_tag("ts")
        .with_timeout(Duration::from_secs(5));
    let start = Instant::now();
    s.connect(&req)?;
    ensure(
        start.elapsed() < Duration::from_secs(5),
        "connect completed without timing out",
    )?;
    ok()
}

// -------------------------------------------------------------------
// event cases
// -------------------------------------------------------------------

fn case_laggard_notified(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?.clone();
    let req = ConnectRequest::new(all_participants(&s, size)).with_tag("lag");
    if rank == 0 {
        s.connect(&req)?;
        return ok();
    }
    let counter = tagged_counter(&s, "lag");
    ensure(
        wait_for(Duration::from_secs(5), || counter.load(Ordering::SeqCst) == 1),
        "laggard receives the connect request",
    )?;
    s.connect(&req)?;
    std::thread::sleep(Duration::from_millis(50));
    ensure(
        counter.load(Ordering::SeqCst) == 1,
        "notification delivered exactly once per request",
    )?;
    ok()
}

fn case_cached_event_on_attach(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    if rank == 0 {
        let s = ctx.session()?;
        let req = ConnectRequest::new(all_participants(s, size)).with_tag("cache");
        s.connect(&req)?;
        return ok();
    }
    // Attach only after the initiator's connect is surely pending, so the
    // notification must be served from the server-side cache.
    std::thread::sleep(Duration::from_millis(300));
    let s = ctx.session()?.clone();
    let counter = tagged_counter(&s, "cache");
    ensure(
        wait_for(Duration::from_secs(5), || counter.load(Ordering::SeqCst) == 1),
        "cached event delivered at attach",
    )?;
    let req = ConnectRequest::new(all_participants(&s, size)).with_tag("cache");
    s.connect(&req)?;
    std::thread::sleep(Duration::from_millis(50));
    ensure(counter.load(Ordering::SeqCst) == 1, "cached event seen exactly once")?;
    ok()
}

fn case_first_caller_never_notified(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?.clone();
    let req = ConnectRequest::new(all_participants(&s, size)).with_tag("first");
    if rank == 0 {
        let counter = tagged_counter(&s, "first");
        s.connect(&req)?;
        std::thread::sleep(Duration::from_millis(150));
        ensure(
            counter.load(Ordering::SeqCst) == 0,
            "a process that already called connect is not asked to",
        )?;
        return ok();
    }
    std::thread::sleep(Duration::from_millis(200));
    s.connect(&req)?;
    ok()
}

fn case_group_ready_event(ctx: &mut StageContext) -> StageResult {
    let size = ctx.size;
    let s = ctx.session()?.clone();
    let payload: Arc<Mutex<Option<Vec<u8>>>> = Arc::new(Mutex::new(None));
    let p = Arc::clone(&payload);
    s.register_event_handler(EventKind::GroupReady, move |ev| {
        p.lock().unwrap().get_or_insert(ev.payload.clone());
    });
    let req = ConnectRequest::new(all_participants(&s, size)).with_tag("ready");
    let info = s.connect(&req)?;
    ensure(
        wait_for(Duration::from_secs(5), || payload.lock().unwrap().is_some()),
        "GROUP_READY fires on completion",
    )?;
    let got = payload.lock().unwrap().clone().unwrap();
    ensure(
        got == info.group.qualified().as_bytes(),
        "GROUP_READY payload names the assigned group",
    )?;
    ok()
}

fn case_handler_unregister(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?.clone();
    let req = ConnectRequest::new(all_participants(&s, size)).with_tag("unreg");
    if rank == 0 {
        s.connect(&req)?;
        return ok();
    }
    if rank == 1 {
        let first = Arc::new(AtomicUsize::new(0));
        let second = Arc::new(AtomicUsize::new(0));
        let f = Arc::clone(&first);
        let h1 = s.register_event_handler(EventKind::ConnectRequested, move |_| {
            f.fetch_add(1, Ordering::SeqCst);
        });
        let g = Arc::clone(&second);
        s.register_event_handler(EventKind::ConnectRequested, move |_| {
            g.fetch_add(1, Ordering::SeqCst);
        });
        s.unregister_event_handler(h1);
        ensure(
            wait_for(Duration::from_secs(5), || second.load(Ordering::SeqCst) >= 1),
            "remaining handler fires",
        )?;
        ensure(
            first.load(Ordering::SeqCst) == 0,
            "unregistered handler never fires",
        )?;
        s.connect(&req)?;
        return ok();
    }
    std::thread::sleep(Duration::from_millis(150));
    s.connect(&req)?;
    ok()
}

fn case_handler_sequential_order(ctx: &mut StageContext) -> StageResult {
    let rank = ctx.rank;
    let tags = ["e1", "e2", "e3"];
    if rank == 0 {
        let s = ctx.session()?.clone();
        let pair = vec![s.peer(0), s.peer(1)];
        let mut joins = Vec::new();
        for tag in tags {
            let s = s.clone();
            let req = ConnectRequest::new(pair.clone()).with_tag(tag);
            joins.push(std::thread::spawn(move || s.connect(&req)));
            std::thread::sleep(Duration::from_millis(40));
        }
        for j in joins {
            j.join().expect("connect thread")?;
        }
        return ok();
    }
    if rank == 1 {
        let s = ctx.session()?.clone();
        let order: Arc<Mutex<Vec<String>>> = Arc::new(Mutex::new(Vec::new()));
        let in_handler = Arc::new(AtomicBool::new(false));
        let overlapped = Arc::new(AtomicBool::new(false));
        let (o, ih, ov) = (Arc::clone(&order), Arc::clone(&in_handler), Arc::clone(&overlapped));
        s.register_event_handler(EventKind::ConnectRequested, move |ev| {
            if ih.swap(true, Ordering::SeqCst) {
                ov.store(true, Ordering::SeqCst);
            }
            std::thread::sleep(Duration::from_millis(20));
            if let EventSubject::Connect(req) = &ev.subject {
                if let Some(tag) = &req.tag {
                    o.lock().unwrap().push(tag.clone());
                }
            }
            ih.store(false, Ordering::SeqCst);
        });
        ensure(
            wait_for(Duration::from_secs(5), || order.lock().unwrap().len() == 3),
            "all three requests observed",
        )?;
        ensure(!overlapped.load(Ordering::SeqCst), "handlers run one at a time")?;
        ensure(
            order.lock().unwrap().as_slice() == tags,
            "events delivered in arrival order",
        )?;
        for tag in tags {
            let req = ConnectRequest::new(vec![s.peer(0), s.peer(1)]).with_tag(tag);
            s.connect(&req)?;
        }
        return ok();
    }
    ok()
}

// -------------------------------------------------------------------
// disconnect and failure cases
// -------------------------------------------------------------------

fn case_disconnect_all(ctx: &mut StageContext) -> StageResult {
    let size = ctx.size;
    let s = ctx.session()?;
    let info = s.connect(&ConnectRequest::new(all_participants(s, size)).with_tag("dall"))?;
    s.disconnect(&info.group)?;
    ok()
}

fn case_disconnect_nonmember(ctx: &mut StageContext) -> StageResult {
    let (rank, _size) = (ctx.rank, ctx.size);
    let s = ctx.session()?.clone();
    expect_class(
        s.disconnect(&Namespace::new("grp-none").unwrap()),
        "NOT_A_MEMBER",
    )?;
    // With three or more ranks, a real group formed by ranks 0 and 1 also
    // rejects an outsider.
    if rank <= 1 {
        let pair = vec![s.peer(0), s.peer(1)];
        let info = s.connect(&ConnectRequest::new(pair).with_tag("d25"))?;
        if rank == 0 {
            s.put("d25grp", info.group.qualified().as_bytes())?;
        }
        s.fence()?;
        s.disconnect(&info.group)?;
    } else {
        s.fence()?;
        let ns = String::from_utf8(s.get(&s.peer(0), "d25grp")?)
            .map_err(|_| StageError::new("CASE_ASSERT", "bad group name"))?;
        expect_class(
            s.disconnect(&Namespace::from_qualified(&ns)?),
            "NOT_A_MEMBER",
        )?;
    }
    ok()
}

fn case_disconnect_waits_inflight(ctx: &mut StageContext) -> StageResult {
    let rank = ctx.rank;
    if rank >= 2 {
        let s = ctx.session()?;
        s.fence()?;
        return ok();
    }
    let s = ctx.session()?.clone();
    let transport = crate::collectives::Transport::bind()
        .map_err(|e| StageError::new(e.class(), e.to_string()))?;
    s.put("endpoint", transport.endpoint().as_bytes())?;
    s.fence()?;
    let pair = vec![s.peer(0), s.peer(1)];
    let info = s.connect(&ConnectRequest::new(pair).with_tag("d26"))?;
    let comm = crate::collectives::communicator_from_group(&s, &transport, &info)
        .map_err(|e| StageError::new(e.class(), e.to_string()))?;
    let group = info.group.clone();

    if rank == 0 {
        // Barrier first (it stays in flight until rank 1 joins at ~300ms),
        // disconnect early.
        let comm = Arc::new(comm);
        let c = Arc::clone(&comm);
        let barrier = std::thread::spawn(move || c.barrier());
        std::thread::sleep(Duration::from_millis(150));
        let start = Instant::now();
        s.disconnect(&group)?;
        let held = start.elapsed();
        barrier.join().expect("barrier thread").map_err(|e| {
            StageError::new(e.class(), e.to_string())
        })?;
        ensure(
            held >= Duration::from_millis(100),
            format!("disconnect returned after {held:?}, before the barrier finished"),
        )?;
    } else {
        std::thread::sleep(Duration::from_millis(100));
        let s2 = s.clone();
        let group2 = group.clone();
        let start = Instant::now();
        let disc = std::thread::spawn(move || {
            let r = s2.disconnect(&group2);
            (r, start.elapsed())
        });
        std::thread::sleep(Duration::from_millis(200));
        comm.barrier().map_err(|e| StageError::new(e.class(), e.to_string()))?;
        let (result, held) = disc.join().expect("disconnect thread");
        result?;
        ensure(
            held >= Duration::from_millis(180),
            format!("disconnect returned after {held:?}, while the barrier was in flight"),
        )?;
    }
    ok()
}

fn case_finalize_fails_waiting_fence(ctx: &mut StageContext) -> StageResult {
    let rank = ctx.rank;
    let s = ctx.session()?.clone();
    if rank == 0 {
        expect_class(s.fence(), "PEER_TERMINATED")?;
        return ok();
    }
    std::thread::sleep(Duration::from_millis(150));
    s.finalize()?;
    ok()
}

fn case_crash_mid_fence(ctx: &mut StageContext) -> StageResult {
    let rank = ctx.rank;
    let s = ctx.session()?.clone();
    if rank == 1 {
        // Enter the fence (it blocks: no peer has called yet), then die
        // hard while still waiting in it.
        let s2 = s.clone();
        std::thread::spawn(move || {
            let _ = s2.fence();
        });
        std::thread::sleep(Duration::from_millis(120));
        std::process::exit(7);
    }
    // Fence only once rank 1 is already dead inside its own fence.
    std::thread::sleep(Duration::from_millis(300));
    expect_class(s.fence(), "PEER_TERMINATED")?;
    ok()
}

fn case_crash_monotonic(ctx: &mut StageContext) -> StageResult {
    let (rank, size) = (ctx.rank, ctx.size);
    let s = ctx.session()?.clone();
    if rank == 1 {
        s.put("k", b"v").ok();
        std::process::exit(9);
    }
    std::thread::sleep(Duration::from_millis(120));
    expect_class(s.fence(), "PEER_TERMINATED")?;
    // Monotonicity: no later operation involving the dead process succeeds.
    expect_class(
        s.connect(&ConnectRequest::new(all_participants(&s, size)).with_tag("mono")),
        "PEER_TERMINATED",
    )?;
    ok()
}

fn case_attach_error_paths(ctx: &mut StageContext) -> StageResult {
    let opts = ctx.attach_options();
    let _s = ctx.session()?;

    let dup = crate::rendezvous::client_attach(&opts);
    expect_class(dup, "DUPLICATE_RANK")?;

    let mut bad_token = opts.clone();
    bad_token.token = Some("definitely-wrong".to_string());
    expect_class(crate::rendezvous::client_attach(&bad_token), "TOKEN_MISMATCH")?;

    let empty = std::env::temp_dir().join(format!(
        "bridgegrid-conf-none-{}-{}",
        std::process::id(),
        ctx.rank
    ));
    let _ = std::fs::create_dir_all(&empty);
    let mut no_server = AttachOptions::new(opts.namespace.clone(), opts.rank, opts.size);
    no_server.contact_dir = Some(empty.clone());
    expect_class(crate::rendezvous::client_attach(&no_server), "NO_SERVER_FOUND")?;
    let _ = std::fs::remove_dir(&empty);
    ok()
}

/// Driver-side evaluation of one finished case run.
pub fn evaluate_case(
    case: &ConformanceCase,
    size: u32,
    outcome: &Result<Vec<Vec<u8>>, TaskError>,
) -> Result<(), String> {
    match (case.expect, outcome) {
        (CaseExpect::AllOk, Ok(results)) => match case.check {
            Some(check) => check(size, results),
            None => Ok(()),
        },
        (CaseExpect::AllOk, Err(e)) => Err(format!("expected success, got {e}")),
        (CaseExpect::WorkerFailed { worker_id }, Err(TaskError::WorkerFailed { worker_id: got, .. })) => {
            if *got == worker_id {
                Ok(())
            } else {
                Err(format!("expected worker {worker_id} to fail, got {got}"))
            }
        }
        (CaseExpect::WorkerFailed { worker_id }, other) => {
            Err(format!("expected WORKER_FAILED({worker_id}), got {other:?}"))
        }
    }
}
