//! The platform's single durable key-value store.
//!
//! Keys are UTF-8, `/`-separated namespaces (`agent/…`, `thread/…`,
//! `tuple/…`). Every key carries a version that starts at 1 and increases by
//! exactly one per successful write; writers pass the version they expect to
//! replace (0 for "key must not exist") to get compare-and-set semantics.
//!
//! Persistence is an append-only log (`store.log`) plus a periodic full
//! snapshot (`store.snap`). Each log entry is a 4-byte big-endian length
//! followed by a frame:
//!
//! ```text
//! key_len: u32 BE | key | value_len: u32 BE | value | version: u64 BE
//! ```
//!
//! A `value_len` of `u32::MAX` marks a tombstone (deletion) and is followed
//! directly by the version. Recovery loads the snapshot, then replays the log
//! suffix; a torn trailing frame left by a crash is discarded.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const LOG_FILE: &str = "store.log";
pub const SNAPSHOT_FILE: &str = "store.snap";
const SNAPSHOT_MAGIC: &[u8; 8] = b"AGYNSNP1";
const TOMBSTONE: u32 = u32::MAX;
const DEFAULT_SNAPSHOT_EVERY: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub key: String,
    pub value: Vec<u8>,
    pub version: u64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("version conflict on {key}: expected {expected}, found {actual}")]
    VersionConflict {
        key: String,
        expected: u64,
        actual: u64,
    },
    #[error("key not found: {0}")]
    NotFound(String),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("corrupt store file: {0}")]
    Corrupt(String),
    #[error("codec error on {key}: {source}")]
    Codec {
        key: String,
        #[source]
        source: serde_json::Error,
    },
}

impl StoreError {
    pub fn is_conflict(&self) -> bool {
        matches!(self, StoreError::VersionConflict { .. })
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

struct Entry {
    value: Vec<u8>,
    version: u64,
}

struct Durable {
    dir: PathBuf,
    log: BufWriter<File>,
    sync: bool,
    writes_since_snapshot: usize,
    snapshot_every: usize,
}

struct Inner {
    map: BTreeMap<String, Entry>,
    durable: Option<Durable>,
}

/// Embedded store. Cheap to share behind an `Arc`; all operations serialize
/// on one internal lock, which makes every key trivially linearizable.
pub struct Store {
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("Store")
            .field("keys", &inner.map.len())
            .field("dir", &inner.durable.as_ref().map(|d| d.dir.clone()))
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// fsync after every append. Off by default: appends still reach the OS
    /// before the call returns, so a process crash loses nothing.
    pub sync: bool,
    /// Compact the log into a snapshot after this many appends.
    pub snapshot_every: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            sync: false,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        }
    }
}

impl Store {
    /// A store that lives only in memory.
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                map: BTreeMap::new(),
                durable: None,
            }),
        }
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(dir, StoreOptions::default())
    }

    pub fn open_with(dir: impl AsRef<Path>, opts: StoreOptions) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut map = BTreeMap::new();

        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            load_snapshot(&snap_path, &mut map)?;
        }

        let log_path = dir.join(LOG_FILE);
        let mut replayed = 0;
        if log_path.exists() {
            let good_len = replay_log(&log_path, &mut map, &mut replayed)?;
            let actual = fs::metadata(&log_path)?.len();
            if good_len < actual {
                tracing::warn!(
                    discarded = actual - good_len,
                    "truncating torn tail of store log"
                );
                OpenOptions::new()
                    .write(true)
                    .open(&log_path)?
                    .set_len(good_len)?;
            }
        }

        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;

        Ok(Self {
            inner: Mutex::new(Inner {
                map,
                durable: Some(Durable {
                    dir,
                    log: BufWriter::new(log),
                    sync: opts.sync,
                    writes_since_snapshot: replayed,
                    snapshot_every: opts.snapshot_every.max(1),
                }),
            }),
        })
    }

    pub fn get(&self, key: &str) -> Option<Record> {
        let inner = self.inner.lock();
        inner.map.get(key).map(|e| Record {
            key: key.to_string(),
            value: e.value.clone(),
            version: e.version,
        })
    }

    /// Current version of `key`, 0 when absent.
    pub fn version(&self, key: &str) -> u64 {
        self.inner.lock().map.get(key).map_or(0, |e| e.version)
    }

    /// Writes `value`. With `expected_version` set, the write only happens if
    /// the stored version matches (0 meaning the key must be absent).
    pub fn put(&self, key: &str, value: &[u8], expected_version: Option<u64>) -> Result<u64> {
        let mut inner = self.inner.lock();
        let current = inner.map.get(key).map_or(0, |e| e.version);
        if let Some(expected) = expected_version {
            if expected != current {
                return Err(StoreError::VersionConflict {
                    key: key.to_string(),
                    expected,
                    actual: current,
                });
            }
        }
        let version = current + 1;
        inner.append(key, Some(value), version)?;
        inner.map.insert(
            key.to_string(),
            Entry {
                value: value.to_vec(),
                version,
            },
        );
        inner.maybe_snapshot()?;
        Ok(version)
    }

    pub fn delete(&self, key: &str, expected_version: u64) -> Result<()> {
        let mut inner = self.inner.lock();
        let current = match inner.map.get(key) {
            Some(e) => e.version,
            None => return Err(StoreError::NotFound(key.to_string())),
        };
        if current != expected_version {
            return Err(StoreError::VersionConflict {
                key: key.to_string(),
                expected: expected_version,
                actual: current,
            });
        }
        inner.append(key, None, current)?;
        inner.map.remove(key);
        inner.maybe_snapshot()?;
        Ok(())
    }

    /// All live records under `prefix`, ascending by key.
    pub fn scan(&self, prefix: &str) -> Result<Vec<Record>> {
        let inner = self.inner.lock();
        Ok(inner
            .map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, e)| Record {
                key: k.clone(),
                value: e.value.clone(),
                version: e.version,
            })
            .collect())
    }

    /// Writes a full snapshot and truncates the log. No-op for in-memory
    /// stores.
    pub fn snapshot(&self) -> Result<()> {
        let mut inner = self.inner.lock();
        inner.write_snapshot()
    }

    pub fn is_durable(&self) -> bool {
        self.inner.lock().durable.is_some()
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &str) -> Result<Option<(T, u64)>> {
        match self.get(key) {
            None => Ok(None),
            Some(rec) => {
                let value = serde_json::from_slice(&rec.value).map_err(|source| {
                    StoreError::Codec {
                        key: key.to_string(),
                        source,
                    }
                })?;
                Ok(Some((value, rec.version)))
            }
        }
    }

    pub fn put_json<T: Serialize>(
        &self,
        key: &str,
        value: &T,
        expected_version: Option<u64>,
    ) -> Result<u64> {
        let bytes = serde_json::to_vec(value).map_err(|source| StoreError::Codec {
            key: key.to_string(),
            source,
        })?;
        self.put(key, &bytes, expected_version)
    }

    pub fn scan_json<T: DeserializeOwned>(&self, prefix: &str) -> Result<Vec<(String, T, u64)>> {
        self.scan(prefix)?
            .into_iter()
            .map(|rec| {
                let value = serde_json::from_slice(&rec.value).map_err(|source| {
                    StoreError::Codec {
                        key: rec.key.clone(),
                        source,
                    }
                })?;
                Ok((rec.key, value, rec.version))
            })
            .collect()
    }

    /// Read-modify-write loop over one JSON value, retried on version
    /// conflicts. `f` sees the current value (if any) and returns the new
    /// value, or an error that aborts the update.
    pub fn update_json<T, E, F>(&self, key: &str, mut f: F) -> std::result::Result<(T, u64), E>
    where
        T: Serialize + DeserializeOwned,
        E: From<StoreError>,
        F: FnMut(Option<T>) -> std::result::Result<T, E>,
    {
        loop {
            let (current, version) = match self.get_json::<T>(key)? {
                Some((v, ver)) => (Some(v), ver),
                None => (None, 0),
            };
            let next = f(current)?;
            match self.put_json(key, &next, Some(version)) {
                Ok(v) => return Ok((next, v)),
                Err(e) if e.is_conflict() => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Inner {
    fn append(&mut self, key: &str, value: Option<&[u8]>, version: u64) -> Result<()> {
        let Some(d) = self.durable.as_mut() else {
            return Ok(());
        };
        let frame = encode_frame(key, value, version);
        d.log.write_all(&(frame.len() as u32).to_be_bytes())?;
        d.log.write_all(&frame)?;
        d.log.flush()?;
        if d.sync {
            d.log.get_ref().sync_data()?;
        }
        d.writes_since_snapshot += 1;
        Ok(())
    }

    fn maybe_snapshot(&mut self) -> Result<()> {
        let due = self
            .durable
            .as_ref()
            .is_some_and(|d| d.writes_since_snapshot >= d.snapshot_every);
        if due {
            self.write_snapshot()?;
        }
        Ok(())
    }

    fn write_snapshot(&mut self) -> Result<()> {
        let Some(d) = self.durable.as_mut() else {
            return Ok(());
        };
        let tmp = d.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(SNAPSHOT_MAGIC)?;
            w.write_all(&(self.map.len() as u64).to_be_bytes())?;
            for (k, e) in &self.map {
                let frame = encode_frame(k, Some(&e.value), e.version);
                w.write_all(&(frame.len() as u32).to_be_bytes())?;
                w.write_all(&frame)?;
            }
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        fs::rename(&tmp, d.dir.join(SNAPSHOT_FILE))?;
        d.log.flush()?;
        d.log.get_ref().set_len(0)?;
        d.log.get_ref().sync_all()?;
        d.writes_since_snapshot = 0;
        Ok(())
    }
}

fn encode_frame(key: &str, value: Option<&[u8]>, version: u64) -> Vec<u8> {
    let vlen = value.map_or(0, |v| v.len());
    let mut out = Vec::with_capacity(4 + key.len() + 4 + vlen + 8);
    out.extend_from_slice(&(key.len() as u32).to_be_bytes());
    out.extend_from_slice(key.as_bytes());
    match value {
        Some(v) => {
            out.extend_from_slice(&(v.len() as u32).to_be_bytes());
            out.extend_from_slice(v);
        }
        None => out.extend_from_slice(&TOMBSTONE.to_be_bytes()),
    }
    out.extend_from_slice(&version.to_be_bytes());
    out
}

struct Frame {
    key: String,
    value: Option<Vec<u8>>,
    version: u64,
}

fn decode_frame(buf: &[u8]) -> Result<Frame> {
    fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
        if buf.len() < n {
            return Err(StoreError::Corrupt("short frame".into()));
        }
        let (head, tail) = buf.split_at(n);
        *buf = tail;
        Ok(head)
    }
    let mut rest = buf;
    let klen = u32::from_be_bytes(take(&mut rest, 4)?.try_into().unwrap()) as usize;
    let key = std::str::from_utf8(take(&mut rest, klen)?)
        .map_err(|_| StoreError::Corrupt("non-utf8 key".into()))?
        .to_string();
    let vlen = u32::from_be_bytes(take(&mut rest, 4)?.try_into().unwrap());
    let value = if vlen == TOMBSTONE {
        None
    } else {
        Some(take(&mut rest, vlen as usize)?.to_vec())
    };
    let version = u64::from_be_bytes(take(&mut rest, 8)?.try_into().unwrap());
    if !rest.is_empty() {
        return Err(StoreError::Corrupt("trailing bytes in frame".into()));
    }
    Ok(Frame {
        key,
        value,
        version,
    })
}

/// Reads one length-prefixed frame. `Ok(None)` on clean EOF or a torn tail.
fn read_frame(r: &mut impl Read) -> Result<Option<(Vec<u8>, u64)>> {
    let mut len = [0u8; 4];
    match read_full(r, &mut len)? {
        0 => return Ok(None),
        4 => {}
        _ => return Ok(None),
    }
    let n = u32::from_be_bytes(len) as usize;
    let mut buf = vec![0u8; n];
    if read_full(r, &mut buf)? < n {
        return Ok(None);
    }
    Ok(Some((buf, 4 + n as u64)))
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn load_snapshot(path: &Path, map: &mut BTreeMap<String, Entry>) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    if read_full(&mut r, &mut magic)? != 8 || &magic != SNAPSHOT_MAGIC {
        return Err(StoreError::Corrupt("bad snapshot header".into()));
    }
    let mut count = [0u8; 8];
    if read_full(&mut r, &mut count)? != 8 {
        return Err(StoreError::Corrupt("bad snapshot header".into()));
    }
    let count = u64::from_be_bytes(count);
    for _ in 0..count {
        let (buf, _) = read_frame(&mut r)?
            .ok_or_else(|| StoreError::Corrupt("snapshot truncated".into()))?;
        let frame = decode_frame(&buf)?;
        let value = frame
            .value
            .ok_or_else(|| StoreError::Corrupt("tombstone in snapshot".into()))?;
        map.insert(
            frame.key,
            Entry {
                value,
                version: frame.version,
            },
        );
    }
    Ok(())
}

/// Returns the byte length of the well-formed log prefix.
fn replay_log(path: &Path, map: &mut BTreeMap<String, Entry>, count: &mut usize) -> Result<u64> {
    let mut r = BufReader::new(File::open(path)?);
    let mut good = 0u64;
    while let Some((buf, consumed)) = read_frame(&mut r)? {
        let Ok(frame) = decode_frame(&buf) else {
            break;
        };
        match frame.value {
            Some(value) => {
                map.insert(
                    frame.key,
                    Entry {
                        value,
                        version: frame.version,
                    },
                );
            }
            None => {
                map.remove(&frame.key);
            }
        }
        good += consumed;
        *count += 1;
    }
    Ok(good)
}
