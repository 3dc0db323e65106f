//! Contact files: how externally launched processes find a server.
//!
//! Each server writes one file `bridgegrid-<pid>-<seq>.contact` into its
//! contact directory, containing a single line `address port token pid`.
//! The client search picks the newest valid file (modification time, then
//! filename, descending) and falls back to a per-user temp subdirectory
//! when no directory was named.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::SystemTime;

use rand::distributions::Alphanumeric;
use rand::Rng;

use super::RendezvousError;

/// Filename suffix of contact files.
pub const CONTACT_SUFFIX: &str = ".contact";

static SERVER_SEQ: AtomicU64 = AtomicU64::new(0);

/// Where the server can be reached, as published on disk.
#[derive(Debug, Clone)]
pub struct ServerContactInfo {
    pub host: String,
    pub port: u16,
    pub token: String,
    pub contact_file_path: PathBuf,
    pub pid: u32,
}

impl ServerContactInfo {
    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

/// A parsed contact file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedContact {
    pub host: String,
    pub port: u16,
    pub token: String,
    pub pid: u32,
    pub path: PathBuf,
}

impl ParsedContact {
    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

/// Per-user fallback directory used when no contact dir is configured.
pub fn default_contact_dir() -> PathBuf {
    let user = std::env::var("USER")
        .or_else(|_| std::env::var("LOGNAME"))
        .unwrap_or_else(|_| format!("uid{}", unsafe { libc::getuid() }));
    std::env::temp_dir().join(format!("bridgegrid-{user}"))
}

pub fn random_token() -> String {
    rand::thread_rng()
        .sample_iter(&Alphanumeric)
        .take(32)
        .map(char::from)
        .collect()
}

/// Write this server's contact file; the sequence number keeps files from
/// multiple servers in one process distinct.
pub(crate) fn write_contact_file(
    dir: &Path,
    host: &str,
    port: u16,
    token: &str,
) -> Result<PathBuf, RendezvousError> {
    let unwritable = |source| RendezvousError::ContactFileUnwritable {
        path: dir.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(unwritable)?;
    let pid = std::process::id();
    let seq = SERVER_SEQ.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!("bridgegrid-{pid}-{seq}{CONTACT_SUFFIX}"));
    let mut f = fs::File::create(&path).map_err(unwritable)?;
    writeln!(f, "{host} {port} {token} {pid}").map_err(unwritable)?;
    f.sync_all().map_err(unwritable)?;
    Ok(path)
}

pub(crate) fn parse_contact_file(path: &Path) -> Option<ParsedContact> {
    let text = fs::read_to_string(path).ok()?;
    let line = text.lines().next()?;
    let mut parts = line.split_whitespace();
    let host = parts.next()?.to_string();
    let port: u16 = parts.next()?.parse().ok()?;
    let token = parts.next()?.to_string();
    let pid: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some(ParsedContact {
        host,
        port,
        token,
        pid,
        path: path.to_path_buf(),
    })
}

/// All valid contact files under `dir`, newest first.
pub fn search_contact_dir(dir: &Path) -> Vec<ParsedContact> {
    let mut found: Vec<(SystemTime, String, ParsedContact)> = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Vec::new(),
    };
    for entry in entries.flatten() {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with("bridgegrid-") || !name.ends_with(CONTACT_SUFFIX) {
            continue;
        }
        if let Some(parsed) = parse_contact_file(&path) {
            let mtime = entry
                .metadata()
                .and_then(|m| m.modified())
                .unwrap_or(SystemTime::UNIX_EPOCH);
            found.push((mtime, name, parsed));
        }
    }
    found.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
    found.into_iter().map(|(_, _, c)| c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_parse_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_contact_file(dir.path(), "127.0.0.1", 4000, "tok").unwrap();
        let parsed = parse_contact_file(&path).unwrap();
        assert_eq!(parsed.host, "127.0.0.1");
        assert_eq!(parsed.port, 4000);
        assert_eq!(parsed.token, "tok");
        assert_eq!(parsed.pid, std::process::id());
    }

    #[test]
    fn two_files_in_one_dir_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_contact_file(dir.path(), "127.0.0.1", 4000, "a").unwrap();
        let b = write_contact_file(dir.path(), "127.0.0.1", 4001, "b").unwrap();
        assert_ne!(a, b);
        assert_eq!(search_contact_dir(dir.path()).len(), 2);
    }

    #[test]
    fn search_prefers_newest() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_contact_file(dir.path(), "127.0.0.1", 1, "a").unwrap();
        let b = write_contact_file(dir.path(), "127.0.0.1", 2, "b").unwrap();
        // Force distinct mtimes regardless of filesystem resolution.
        let old = SystemTime::now() - std::time::Duration::from_secs(60);
        let f = fs::File::options().append(true).open(&a).unwrap();
        f.set_modified(old).unwrap();
        drop(f);
        let found = search_contact_dir(dir.path());
        assert_eq!(found[0].path, b);
        assert_eq!(found[1].path, a);
    }

    #[test]
    fn garbage_files_ignored() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bridgegrid-x.contact"), "not a contact").unwrap();
        fs::write(dir.path().join("unrelated.txt"), "hi").unwrap();
        assert!(search_contact_dir(dir.path()).is_empty());
    }
}
