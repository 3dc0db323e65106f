//! C ABI for the bridgegrid runtime: opaque handles over the rendezvous
//! server, client sessions, and communicators, so workers written in
//! other languages can attach to a running server, exchange endpoints,
//! and run collectives.
//!
//! Conventions: every fallible function returns a [`BgStatus`]; out
//! parameters are written only on `BG_OK`. Handles are freed with their
//! `bg_*_free` function exactly once. Strings are NUL-terminated UTF-8.
//! `bg_last_error_message` returns a thread-local description of the most
//! recent failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;
use std::time::Duration;

use bridgegrid::collectives::{
    communicator_from_group, AllreduceVariant, Communicator, ReduceOp, Transport,
};
use bridgegrid::rendezvous::{
    client_attach, server_start, AttachOptions, ConnectRequest, Server, ServerConfig, Session,
};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgStatus {
    BgOk = 0,
    BgErrInvalidArgument = 1,
    BgErrBindFailed = 2,
    BgErrContactFile = 3,
    BgErrNoServerFound = 4,
    BgErrDuplicateRank = 5,
    BgErrTokenMismatch = 6,
    BgErrSessionClosed = 7,
    BgErrKeyNotVisible = 8,
    BgErrUnknownProcess = 9,
    BgErrPeerTerminated = 10,
    BgErrTimeout = 11,
    BgErrNotAMember = 12,
    BgErrMissingEndpoint = 13,
    BgErrPeerUnreachable = 14,
    BgErrLengthMismatch = 15,
    BgErrConcurrentCollective = 16,
    BgErrProtocol = 17,
    BgErrIo = 18,
    BgErrInternal = 19,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgReduceOp {
    BgReduceSum = 0,
    BgReduceMin = 1,
    BgReduceMax = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgAllreduceVariant {
    BgAllreduceTree = 0,
    BgAllreduceRing = 1,
}

/// Opaque server handle.
pub struct BgServer {
    inner: Server,
    contact_path: CString,
    addr: CString,
    token: CString,
}

/// Opaque session handle; owns a lazily bound transport for collectives.
pub struct BgSession {
    session: Session,
    transport: Option<Transport>,
}

/// Opaque communicator handle.
pub struct BgCommunicator {
    comm: Communicator,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(text).unwrap_or_default();
    });
}

fn class_to_status(class: &str) -> BgStatus {
    match class {
        "BIND_FAILED" => BgStatus::BgErrBindFailed,
        "CONTACT_FILE_UNWRITABLE" => BgStatus::BgErrContactFile,
        "NO_SERVER_FOUND" => BgStatus::BgErrNoServerFound,
        "DUPLICATE_RANK" => BgStatus::BgErrDuplicateRank,
        "TOKEN_MISMATCH" => BgStatus::BgErrTokenMismatch,
        "SESSION_CLOSED" => BgStatus::BgErrSessionClosed,
        "KEY_NOT_VISIBLE" => BgStatus::BgErrKeyNotVisible,
        "UNKNOWN_PROCESS" => BgStatus::BgErrUnknownProcess,
        "PEER_TERMINATED" => BgStatus::BgErrPeerTerminated,
        "TIMEOUT" => BgStatus::BgErrTimeout,
        "NOT_A_MEMBER" => BgStatus::BgErrNotAMember,
        "MISSING_ENDPOINT" => BgStatus::BgErrMissingEndpoint,
        "PEER_UNREACHABLE" => BgStatus::BgErrPeerUnreachable,
        "LENGTH_MISMATCH" => BgStatus::BgErrLengthMismatch,
        "CONCURRENT_COLLECTIVE" => BgStatus::BgErrConcurrentCollective,
        "PROTOCOL" | "WIRE" => BgStatus::BgErrProtocol,
        "IO" => BgStatus::BgErrIo,
        _ => BgStatus::BgErrInternal,
    }
}

fn rdv_error(e: bridgegrid::rendezvous::RendezvousError) -> BgStatus {
    let status = class_to_status(e.class());
    set_error(e.to_string());
    status
}

fn coll_error(e: bridgegrid::collectives::CollectiveError) -> BgStatus {
    let status = class_to_status(e.class());
    set_error(e.to_string());
    status
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, BgStatus> {
    if p.is_null() {
        set_error("unexpected NULL string argument");
        return Err(BgStatus::BgErrInvalidArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        BgStatus::BgErrInvalidArgument
    })
}

unsafe fn opt_cstr<'a>(p: *const c_char) -> Result<Option<&'a str>, BgStatus> {
    if p.is_null() {
        Ok(None)
    } else {
        cstr(p).map(Some)
    }
}

/// Description of the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Start a rendezvous server bound to `bind_addr` (for example
/// "127.0.0.1:0"), writing its contact file under `contact_dir`.
#[no_mangle]
pub unsafe extern "C" fn bg_server_start(
    bind_addr: *const c_char,
    contact_dir: *const c_char,
    out_server: *mut *mut BgServer,
) -> BgStatus {
    if out_server.is_null() {
        set_error("out_server is NULL");
        return BgStatus::BgErrInvalidArgument;
    }
    let (bind_addr, contact_dir) = match (cstr(bind_addr), cstr(contact_dir)) {
        (Ok(a), Ok(d)) => (a, d),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    let mut config = ServerConfig::new(PathBuf::from(contact_dir));
    config.bind = bind_addr.to_string();
    match server_start(&config) {
        Ok(server) => {
            let contact = server.contact();
            let handle = Box::new(BgServer {
                contact_path: CString::new(contact.contact_file_path.display().to_string())
                    .unwrap_or_default(),
                addr: CString::new(contact.addr()).unwrap_or_default(),
                token: CString::new(contact.token.clone()).unwrap_or_default(),
                inner: server,
            });
            *out_server = Box::into_raw(handle);
            BgStatus::BgOk
        }
        Err(e) => rdv_error(e),
    }
}

/// Path of the server's contact file; valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn bg_server_contact_path(server: *const BgServer) -> *const c_char {
    if server.is_null() {
        return ptr::null();
    }
    (*server).contact_path.as_ptr()
}

/// `host:port` the server listens on; valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn bg_server_addr(server: *const BgServer) -> *const c_char {
    if server.is_null() {
        return ptr::null();
    }
    (*server).addr.as_ptr()
}

/// Authentication token; valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn bg_server_token(server: *const BgServer) -> *const c_char {
    if server.is_null() {
        return ptr::null();
    }
    (*server).token.as_ptr()
}

/// Shut the server down and free the handle.
#[no_mangle]
pub unsafe extern "C" fn bg_server_free(server: *mut BgServer) {
    if !server.is_null() {
        let mut boxed = Box::from_raw(server);
        boxed.inner.shutdown();
    }
}

/// Attach to a server as `(namespace, rank)` of a namespace sized `size`.
/// `server_addr` and `token` may be NULL to fall back to the contact-file
/// search under `contact_dir` (itself optional).
#[no_mangle]
pub unsafe extern "C" fn bg_attach(
    namespace: *const c_char,
    rank: u32,
    size: u32,
    server_addr: *const c_char,
    token: *const c_char,
    contact_dir: *const c_char,
    out_session: *mut *mut BgSession,
) -> BgStatus {
    if out_session.is_null() {
        set_error("out_session is NULL");
        return BgStatus::BgErrInvalidArgument;
    }
    let namespace = match cstr(namespace) {
        Ok(n) => n,
        Err(s) => return s,
    };
    let (server_addr, token, contact_dir) =
        match (opt_cstr(server_addr), opt_cstr(token), opt_cstr(contact_dir)) {
            (Ok(a), Ok(t), Ok(d)) => (a, t, d),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
    let mut opts = AttachOptions::new(namespace, rank, size);
    opts.server = server_addr.map(str::to_string);
    opts.token = token.map(str::to_string);
    opts.contact_dir = contact_dir.map(PathBuf::from);
    match client_attach(&opts) {
        Ok(session) => {
            *out_session = Box::into_raw(Box::new(BgSession {
                session,
                transport: None,
            }));
            BgStatus::BgOk
        }
        Err(e) => rdv_error(e),
    }
}

/// Store a key-value pair; peers see it after the next completed fence.
#[no_mangle]
pub unsafe extern "C" fn bg_put(
    session: *mut BgSession,
    key: *const c_char,
    value: *const u8,
    value_len: usize,
) -> BgStatus {
    let Some(handle) = session.as_mut() else {
        set_error("session is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    let key = match cstr(key) {
        Ok(k) => k,
        Err(s) => return s,
    };
    let value = if value.is_null() {
        &[][..]
    } else {
        std::slice::from_raw_parts(value, value_len)
    };
    match handle.session.put(key, value) {
        Ok(()) => BgStatus::BgOk,
        Err(e) => rdv_error(e),
    }
}

/// Block until every rank of the namespace has fenced; commits all puts.
#[no_mangle]
pub unsafe extern "C" fn bg_fence(session: *mut BgSession) -> BgStatus {
    let Some(handle) = session.as_mut() else {
        set_error("session is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    match handle.session.fence() {
        Ok(()) => BgStatus::BgOk,
        Err(e) => rdv_error(e),
    }
}

/// Fetch a committed value into a freshly allocated buffer; release it
/// with `bg_buffer_free`.
#[no_mangle]
pub unsafe extern "C" fn bg_get(
    session: *mut BgSession,
    owner_rank: u32,
    key: *const c_char,
    out_value: *mut *mut u8,
    out_len: *mut usize,
) -> BgStatus {
    let Some(handle) = session.as_mut() else {
        set_error("session is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    if out_value.is_null() || out_len.is_null() {
        set_error("out pointers are NULL");
        return BgStatus::BgErrInvalidArgument;
    }
    let key = match cstr(key) {
        Ok(k) => k,
        Err(s) => return s,
    };
    let owner = handle.session.peer(owner_rank);
    match handle.session.get(&owner, key) {
        Ok(value) => {
            let mut boxed = value.into_boxed_slice();
            *out_len = boxed.len();
            *out_value = boxed.as_mut_ptr();
            std::mem::forget(boxed);
            BgStatus::BgOk
        }
        Err(e) => rdv_error(e),
    }
}

/// Free a buffer returned by `bg_get`.
#[no_mangle]
pub unsafe extern "C" fn bg_buffer_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::slice::from_raw_parts_mut(ptr, len)));
    }
}

/// Bind this session's collective transport and publish its endpoint
/// under the key `"endpoint"`. Call before the fence that precedes
/// `bg_connect`.
#[no_mangle]
pub unsafe extern "C" fn bg_endpoint_publish(session: *mut BgSession) -> BgStatus {
    let Some(handle) = session.as_mut() else {
        set_error("session is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    if handle.transport.is_none() {
        match Transport::bind() {
            Ok(t) => handle.transport = Some(t),
            Err(e) => return coll_error(e),
        }
    }
    let endpoint = handle.transport.as_ref().unwrap().endpoint();
    match handle.session.put("endpoint", endpoint.as_bytes()) {
        Ok(()) => BgStatus::BgOk,
        Err(e) => rdv_error(e),
    }
}

/// Collective group formation over `ranks` of this session's namespace
/// (NULL means all ranks). Completes when every participant has called
/// with the same participant set and `tag`; `timeout_ms` of 0 disables
/// the timeout. Yields a communicator over the published endpoints.
#[no_mangle]
pub unsafe extern "C" fn bg_connect(
    session: *mut BgSession,
    ranks: *const u32,
    n_ranks: usize,
    tag: *const c_char,
    timeout_ms: u64,
    out_comm: *mut *mut BgCommunicator,
) -> BgStatus {
    let Some(handle) = session.as_mut() else {
        set_error("session is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    if out_comm.is_null() {
        set_error("out_comm is NULL");
        return BgStatus::BgErrInvalidArgument;
    }
    let tag = match opt_cstr(tag) {
        Ok(t) => t,
        Err(s) => return s,
    };
    if handle.transport.is_none() {
        set_error("call bg_endpoint_publish (and fence) before bg_connect");
        return BgStatus::BgErrMissingEndpoint;
    }
    let participants: Vec<_> = if ranks.is_null() {
        (0..handle.session.size())
            .map(|r| handle.session.peer(r))
            .collect()
    } else {
        std::slice::from_raw_parts(ranks, n_ranks)
            .iter()
            .map(|r| handle.session.peer(*r))
            .collect()
    };
    let mut request = ConnectRequest::new(participants);
    if let Some(tag) = tag {
        request = request.with_tag(tag);
    }
    if timeout_ms > 0 {
        request = request.with_timeout(Duration::from_millis(timeout_ms));
    }
    let info = match handle.session.connect(&request) {
        Ok(info) => info,
        Err(e) => return rdv_error(e),
    };
    match communicator_from_group(
        &handle.session,
        handle.transport.as_ref().unwrap(),
        &info,
    ) {
        Ok(comm) => {
            *out_comm = Box::into_raw(Box::new(BgCommunicator { comm }));
            BgStatus::BgOk
        }
        Err(e) => coll_error(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn bg_comm_rank(comm: *const BgCommunicator) -> u32 {
    comm.as_ref().map(|c| c.comm.rank()).unwrap_or(u32::MAX)
}

#[no_mangle]
pub unsafe extern "C" fn bg_comm_size(comm: *const BgCommunicator) -> u32 {
    comm.as_ref().map(|c| c.comm.size()).unwrap_or(0)
}

/// Block until every group member has entered.
#[no_mangle]
pub unsafe extern "C" fn bg_barrier(comm: *mut BgCommunicator) -> BgStatus {
    let Some(handle) = comm.as_mut() else {
        set_error("communicator is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    match handle.comm.barrier() {
        Ok(()) => BgStatus::BgOk,
        Err(e) => coll_error(e),
    }
}

/// In-place allreduce over `data[0..len]`; every member must pass the
/// same `len`, `op`, and `variant`.
#[no_mangle]
pub unsafe extern "C" fn bg_allreduce(
    comm: *mut BgCommunicator,
    data: *mut f64,
    len: usize,
    op: BgReduceOp,
    variant: BgAllreduceVariant,
) -> BgStatus {
    let Some(handle) = comm.as_mut() else {
        set_error("communicator is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    if data.is_null() && len > 0 {
        set_error("data is NULL");
        return BgStatus::BgErrInvalidArgument;
    }
    let buffer = std::slice::from_raw_parts_mut(data, len);
    let op = match op {
        BgReduceOp::BgReduceSum => ReduceOp::Sum,
        BgReduceOp::BgReduceMin => ReduceOp::Min,
        BgReduceOp::BgReduceMax => ReduceOp::Max,
    };
    let variant = match variant {
        BgAllreduceVariant::BgAllreduceTree => AllreduceVariant::Tree,
        BgAllreduceVariant::BgAllreduceRing => AllreduceVariant::Ring,
    };
    match handle.comm.allreduce(buffer, op, variant) {
        Ok(result) => {
            buffer.copy_from_slice(&result);
            BgStatus::BgOk
        }
        Err(e) => coll_error(e),
    }
}

/// Collective group dissolution; completes after every member calls it
/// and all collectives on the group have finished.
#[no_mangle]
pub unsafe extern "C" fn bg_disconnect(
    session: *mut BgSession,
    comm: *mut BgCommunicator,
) -> BgStatus {
    let Some(handle) = session.as_mut() else {
        set_error("session is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    let Some(c) = comm.as_ref() else {
        set_error("communicator is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    let ns = match bridgegrid::rendezvous::Namespace::from_qualified(c.comm.group()) {
        Ok(ns) => ns,
        Err(e) => return rdv_error(e),
    };
    match handle.session.disconnect(&ns) {
        Ok(()) => BgStatus::BgOk,
        Err(e) => rdv_error(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn bg_comm_free(comm: *mut BgCommunicator) {
    if !comm.is_null() {
        drop(Box::from_raw(comm));
    }
}

/// Deregister from the server; peers blocked on this process observe
/// `PEER_TERMINATED`.
#[no_mangle]
pub unsafe extern "C" fn bg_session_finalize(session: *mut BgSession) -> BgStatus {
    let Some(handle) = session.as_mut() else {
        set_error("session is NULL");
        return BgStatus::BgErrInvalidArgument;
    };
    match handle.session.finalize() {
        Ok(()) => BgStatus::BgOk,
        Err(e) => rdv_error(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn bg_session_free(session: *mut BgSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn full_bridge_flow_over_the_c_abi() {
        let dir = tempfile::tempdir().unwrap();
        let bind = c("127.0.0.1:0");
        let contact_dir = c(dir.path().to_str().unwrap());

        let mut server: *mut BgServer = ptr::null_mut();
        unsafe {
            assert_eq!(
                bg_server_start(bind.as_ptr(), contact_dir.as_ptr(), &mut server),
                BgStatus::BgOk
            );
            let path = CStr::from_ptr(bg_server_contact_path(server));
            assert!(std::path::Path::new(path.to_str().unwrap()).exists());

            let addr = CStr::from_ptr(bg_server_addr(server)).to_owned();
            let token = CStr::from_ptr(bg_server_token(server)).to_owned();
            let ns = c("cjob");

            // Two ranks on threads, exercising attach/put/fence/get,
            // endpoint publication, connect, and a ring allreduce.
            let results: Vec<f64> = std::thread::scope(|scope| {
                let joins: Vec<_> = (0..2u32)
                    .map(|rank| {
                        let (addr, token, ns) = (addr.clone(), token.clone(), ns.clone());
                        scope.spawn(move || {
                            let mut session: *mut BgSession = ptr::null_mut();
                            assert_eq!(
                                bg_attach(
                                    ns.as_ptr(),
                                    rank,
                                    2,
                                    addr.as_ptr(),
                                    token.as_ptr(),
                                    ptr::null(),
                                    &mut session,
                                ),
                                BgStatus::BgOk
                            );
                            let key = c("who");
                            let value = format!("rank{rank}");
                            assert_eq!(
                                bg_put(session, key.as_ptr(), value.as_ptr(), value.len()),
                                BgStatus::BgOk
                            );
                            assert_eq!(bg_endpoint_publish(session), BgStatus::BgOk);
                            assert_eq!(bg_fence(session), BgStatus::BgOk);

                            let mut buf: *mut u8 = ptr::null_mut();
                            let mut len = 0usize;
                            assert_eq!(
                                bg_get(session, 1 - rank, key.as_ptr(), &mut buf, &mut len),
                                BgStatus::BgOk
                            );
                            let peer = std::slice::from_raw_parts(buf, len).to_vec();
                            assert_eq!(peer, format!("rank{}", 1 - rank).into_bytes());
                            bg_buffer_free(buf, len);

                            let mut comm: *mut BgCommunicator = ptr::null_mut();
                            assert_eq!(
                                bg_connect(session, ptr::null(), 0, ptr::null(), 0, &mut comm),
                                BgStatus::BgOk
                            );
                            assert_eq!(bg_comm_rank(comm), rank);
                            assert_eq!(bg_comm_size(comm), 2);
                            assert_eq!(bg_barrier(comm), BgStatus::BgOk);

                            let mut data = [rank as f64 + 1.0, 10.0];
                            assert_eq!(
                                bg_allreduce(
                                    comm,
                                    data.as_mut_ptr(),
                                    2,
                                    BgReduceOp::BgReduceSum,
                                    BgAllreduceVariant::BgAllreduceRing,
                                ),
                                BgStatus::BgOk
                            );
                            assert_eq!(bg_disconnect(session, comm), BgStatus::BgOk);
                            bg_comm_free(comm);
                            assert_eq!(bg_session_finalize(session), BgStatus::BgOk);
                            bg_session_free(session);
                            data[0] + data[1]
                        })
                    })
                    .collect();
                joins.into_iter().map(|j| j.join().unwrap()).collect()
            });
            // 1 + 2 = 3 in element 0, 10 + 10 = 20 in element 1.
            assert_eq!(results, vec![23.0, 23.0]);

            bg_server_free(server);
        }
    }

    #[test]
    fn errors_map_to_status_codes_and_messages() {
        let dir = tempfile::tempdir().unwrap();
        let ns = c("nope");
        let contact_dir = c(dir.path().to_str().unwrap());
        let mut session: *mut BgSession = ptr::null_mut();
        unsafe {
            let status = bg_attach(
                ns.as_ptr(),
                0,
                1,
                ptr::null(),
                ptr::null(),
                contact_dir.as_ptr(),
                &mut session,
            );
            assert_eq!(status, BgStatus::BgErrNoServerFound);
            let message = CStr::from_ptr(bg_last_error_message());
            assert!(!message.to_bytes().is_empty());

            assert_eq!(
                bg_fence(ptr::null_mut()),
                BgStatus::BgErrInvalidArgument
            );
        }
    }

    #[test]
    fn generated_header_exists_and_names_the_surface() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("include")
            .join("bridgegrid.h");
        let text = std::fs::read_to_string(&header).expect("cbindgen header generated at build");
        for symbol in [
            "bg_server_start",
            "bg_attach",
            "bg_put",
            "bg_fence",
            "bg_get",
            "bg_connect",
            "bg_allreduce",
            "bg_last_error_message",
            "BgStatus",
        ] {
            assert!(text.contains(symbol), "header is missing {symbol}");
        }
    }
}
