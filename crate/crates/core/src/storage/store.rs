use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use super::buffer::{Record, SnapshotBuffer};
use super::manifest::{ChunkEntry, ManifestState, SessionManifest};
use super::{decode, device_for_chunk, encode, ChunkKey, DevicePool, StateKind, StorageError, CHUNK_TOKENS};
use crate::model::{HiddenStates, KvCache, Matrix};
use crate::schedule::{LayerMethod, RestorationPlan};

/// Fields fixed when a session is created.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionSpec {
    pub session_id: String,
    pub config_hash: String,
    pub plan: RestorationPlan,
    pub d_hidden: usize,
    pub elem_bytes: usize,
}

/// Rows read back for one layer, with the simulated device time they cost.
#[derive(Clone, Debug)]
pub struct LayerRead {
    pub data: Matrix,
    pub bytes_per_device: Vec<u64>,
    /// Slowest device's bytes over the per-device throttle; zero when unthrottled.
    pub sim_seconds: f64,
}

type Slot = (usize, StateKind);

/// Snapshot-side bookkeeping, touched only on the inference thread's path.
struct Cursor {
    plan: RestorationPlan,
    d_hidden: usize,
    elem_bytes: usize,
    next: HashMap<Slot, usize>,
    tokens: Vec<u32>,
    writable: bool,
}

/// The rows of the chunk currently being filled.
struct Assembly {
    first_token: usize,
    data: Vec<f32>,
}

struct SessionState {
    manifest: SessionManifest,
    assemblies: HashMap<Slot, Assembly>,
    tokens: Vec<u32>,
    corrupt: bool,
}

/// Sessions persisted on a device pool.
///
/// `snapshot_*` only copies into the bounded buffer; `drain` (directly or via
/// [`spawn_daemon`]) assembles chunks and writes them. Reads are allowed after
/// `finalize`.
pub struct SessionStore {
    pool: DevicePool,
    buffer: SnapshotBuffer,
    cursors: Mutex<HashMap<String, Cursor>>,
    sessions: Mutex<HashMap<String, SessionState>>,
    drain_lock: Mutex<()>,
    chunks_written: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl SessionStore {
    pub fn new(pool: DevicePool, buffer_bytes: usize) -> Self {
        Self {
            pool,
            buffer: SnapshotBuffer::new(buffer_bytes),
            cursors: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            drain_lock: Mutex::new(()),
            chunks_written: AtomicU64::new(0),
        }
    }

    pub fn pool(&self) -> &DevicePool {
        &self.pool
    }

    pub fn buffer(&self) -> &SnapshotBuffer {
        &self.buffer
    }

    pub fn chunks_written(&self) -> u64 {
        self.chunks_written.load(Ordering::Relaxed)
    }

    pub fn create_session(&self, spec: SessionSpec) -> Result<(), StorageError> {
        let id = &spec.session_id;
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(StorageError::Shape(format!("bad session id {id:?}")));
        }
        if !matches!(spec.elem_bytes, 2 | 4) {
            return Err(StorageError::Shape(format!("elem_bytes {} unsupported", spec.elem_bytes)));
        }
        let mut sessions = lock(&self.sessions);
        let mut cursors = lock(&self.cursors);
        if sessions.contains_key(id) || self.pool.manifest_path(id).exists() {
            return Err(StorageError::DuplicateSession(id.clone()));
        }
        for dev in 0..self.pool.len() {
            std::fs::create_dir_all(self.pool.session_dir(dev, id))?;
        }
        let manifest = SessionManifest {
            session_id: id.clone(),
            config_hash: spec.config_hash.clone(),
            n_tokens: 0,
            plan: spec.plan,
            chunk_tokens: CHUNK_TOKENS,
            n_devices: self.pool.len(),
            elem_bytes: spec.elem_bytes,
            d_hidden: spec.d_hidden,
            state: ManifestState::Open,
            chunks: Vec::new(),
        };
        manifest.write_atomic(&self.pool.manifest_path(id))?;
        cursors.insert(
            id.clone(),
            Cursor {
                plan: spec.plan,
                d_hidden: spec.d_hidden,
                elem_bytes: spec.elem_bytes,
                next: HashMap::new(),
                tokens: Vec::new(),
                writable: true,
            },
        );
        sessions.insert(id.clone(), SessionState { manifest, assemblies: HashMap::new(), tokens: Vec::new(), corrupt: false });
        Ok(())
    }

    /// Load a finalized session from disk for reading.
    pub fn open_session(&self, id: &str) -> Result<SessionManifest, StorageError> {
        if let Some(s) = lock(&self.sessions).get(id) {
            return match s.manifest.state {
                ManifestState::Final => Ok(s.manifest.clone()),
                ManifestState::Open => Err(StorageError::NotFinalized(id.to_string())),
            };
        }
        let path = self.pool.manifest_path(id);
        if !path.exists() {
            return Err(StorageError::UnknownSession(id.to_string()));
        }
        let manifest = SessionManifest::load(&path)?;
        if manifest.state == ManifestState::Open {
            return Err(StorageError::Incomplete(id.to_string()));
        }
        if manifest.n_devices != self.pool.len() {
            return Err(StorageError::BadManifest(format!(
                "session striped over {} devices, pool has {}",
                manifest.n_devices,
                self.pool.len()
            )));
        }
        let bytes = std::fs::read(self.pool.tokens_path(id))?;
        let tokens: Vec<u32> = bytes.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if tokens.len() != manifest.n_tokens {
            return Err(StorageError::BadManifest(format!("tokens.bin holds {} tokens", tokens.len())));
        }
        let mut sessions = lock(&self.sessions);
        let mut cursors = lock(&self.cursors);
        let mut next = HashMap::new();
        for c in &manifest.chunks {
            let e = next.entry((c.layer, c.kind)).or_insert(0);
            *e = (*e).max(c.chunk_idx * CHUNK_TOKENS + c.tokens);
        }
        cursors.insert(
            id.to_string(),
            Cursor {
                plan: manifest.plan,
                d_hidden: manifest.d_hidden,
                elem_bytes: manifest.elem_bytes,
                next,
                tokens: tokens.clone(),
                writable: false,
            },
        );
        sessions.insert(
            id.to_string(),
            SessionState { manifest: manifest.clone(), assemblies: HashMap::new(), tokens, corrupt: false },
        );
        Ok(manifest)
    }

    /// Make a finalized session appendable again, e.g. for the next round of a
    /// conversation. Trailing partial chunks move back into assembly so later
    /// tokens fill them up.
    pub fn reopen_session(&self, id: &str) -> Result<(), StorageError> {
        if !lock(&self.sessions).contains_key(id) {
            self.open_session(id)?;
        }
        let _drain = lock(&self.drain_lock);
        let mut sessions = lock(&self.sessions);
        let s = sessions.get_mut(id).ok_or_else(|| StorageError::UnknownSession(id.to_string()))?;
        if s.corrupt {
            return Err(StorageError::Corrupt(id.to_string()));
        }
        if s.manifest.state == ManifestState::Open {
            return Ok(());
        }
        let partial: Vec<ChunkEntry> =
            s.manifest.chunks.iter().filter(|c| c.tokens < CHUNK_TOKENS).cloned().collect();
        for c in &partial {
            let key = ChunkKey { session: id.to_string(), layer: c.layer, kind: c.kind, chunk_idx: c.chunk_idx };
            let bytes = std::fs::read(self.pool.chunk_path(&key))?;
            let mut data = Vec::new();
            decode(&bytes, s.manifest.elem_bytes, &mut data);
            s.assemblies.insert((c.layer, c.kind), Assembly { first_token: key.first_token(), data });
        }
        s.manifest.chunks.retain(|c| c.tokens == CHUNK_TOKENS);
        s.manifest.state = ManifestState::Open;
        s.manifest.write_atomic(&self.pool.manifest_path(id))?;
        if let Some(c) = lock(&self.cursors).get_mut(id) {
            c.writable = true;
        }
        Ok(())
    }

    pub fn manifest(&self, id: &str) -> Result<SessionManifest, StorageError> {
        lock(&self.sessions)
            .get(id)
            .map(|s| s.manifest.clone())
            .ok_or_else(|| StorageError::UnknownSession(id.to_string()))
    }

    pub fn is_corrupt(&self, id: &str) -> bool {
        lock(&self.sessions).get(id).is_some_and(|s| s.corrupt)
    }

    /// Record tokens at positions `start..`, needed to recompute layers later.
    pub fn append_tokens(&self, id: &str, start: usize, tokens: &[u32]) -> Result<(), StorageError> {
        let mut cursors = lock(&self.cursors);
        let c = cursors.get_mut(id).ok_or_else(|| StorageError::UnknownSession(id.to_string()))?;
        if !c.writable {
            return Err(StorageError::Finalized(id.to_string()));
        }
        if start != c.tokens.len() {
            return Err(StorageError::Shape(format!("tokens appended at {start}, expected {}", c.tokens.len())));
        }
        c.tokens.extend_from_slice(tokens);
        Ok(())
    }

    pub fn n_tokens_recorded(&self, id: &str) -> Option<usize> {
        lock(&self.cursors).get(id).map(|c| c.tokens.len())
    }

    fn make_record(
        cursor: &Cursor,
        next: &mut HashMap<Slot, usize>,
        id: &str,
        layer: usize,
        kind: StateKind,
        start: usize,
        rows: &Matrix,
    ) -> Result<Record, StorageError> {
        if !cursor.writable {
            return Err(StorageError::Finalized(id.to_string()));
        }
        let n_layers = cursor.plan.n_layers();
        if layer >= n_layers {
            return Err(StorageError::Shape(format!("layer {layer} of {n_layers}")));
        }
        let expected = match cursor.plan.method(layer) {
            LayerMethod::Hidden => Some(StateKind::Hidden),
            LayerMethod::Kv => Some(StateKind::Kv),
            LayerMethod::Recompute => None,
        };
        if expected != Some(kind) {
            return Err(StorageError::PlanMismatch(format!("layer {layer} does not store {kind} state")));
        }
        let width = kind.width(cursor.d_hidden);
        if rows.cols() != width || rows.rows() == 0 {
            return Err(StorageError::Shape(format!("{}x{} rows for {kind} width {width}", rows.rows(), rows.cols())));
        }
        let pos = next.entry((layer, kind)).or_insert(0);
        if start != *pos {
            return Err(StorageError::Shape(format!(
                "layer {layer} {kind}: rows start at {start}, expected {}",
                *pos
            )));
        }
        *pos += rows.rows();
        Ok(Record {
            session: id.to_string(),
            layer,
            kind,
            start,
            width,
            data: rows.data().to_vec(),
            bytes: rows.data().len() * cursor.elem_bytes,
        })
    }

    /// Stage-1 copy of many `(session, layer, kind, start, rows)` slices under
    /// one lock. Never touches a device. With `blocking`, waits for buffer space
    /// and reports whether it stalled; otherwise returns `Backpressure`.
    pub fn snapshot_batch(
        &self,
        items: &[(&str, usize, StateKind, usize, &Matrix)],
        blocking: bool,
    ) -> Result<bool, StorageError> {
        let mut cursors = lock(&self.cursors);
        let mut staged: HashMap<String, HashMap<Slot, usize>> = HashMap::new();
        let mut records = Vec::with_capacity(items.len());
        for &(id, layer, kind, start, rows) in items {
            let cursor = cursors.get(id).ok_or_else(|| StorageError::UnknownSession(id.to_string()))?;
            let next = staged.entry(id.to_string()).or_insert_with(|| cursor.next.clone());
            records.push(Self::make_record(cursor, next, id, layer, kind, start, rows)?);
        }
        let stalled = if blocking { self.buffer.push_blocking(records)? } else {
            self.buffer.try_push(records)?;
            false
        };
        for (id, next) in staged {
            if let Some(c) = cursors.get_mut(&id) {
                c.next = next;
            }
        }
        Ok(stalled)
    }

    pub fn snapshot_layer(
        &self,
        id: &str,
        layer: usize,
        kind: StateKind,
        start: usize,
        rows: &Matrix,
    ) -> Result<(), StorageError> {
        self.snapshot_batch(&[(id, layer, kind, start, rows)], false).map(|_| ())
    }

    /// Snapshot what the session's plan stores from a forward pass: the layer
    /// input for hidden-state layers and K/V rows for KV layers. Recomputed
    /// layers store nothing.
    pub fn snapshot_forward(
        &self,
        id: &str,
        hidden: &[HiddenStates],
        kv: &KvCache,
        blocking: bool,
    ) -> Result<bool, StorageError> {
        let plan = lock(&self.cursors)
            .get(id)
            .map(|c| c.plan)
            .ok_or_else(|| StorageError::UnknownSession(id.to_string()))?;
        let mut owned: Vec<(usize, StateKind, usize, Matrix)> = Vec::new();
        for h in hidden {
            match plan.method(h.layer) {
                LayerMethod::Hidden => owned.push((h.layer, StateKind::Hidden, h.start, h.data.clone())),
                LayerMethod::Kv => owned.push((h.layer, StateKind::Kv, h.start, kv_rows(kv, h.layer, h.start..h.end())?)),
                LayerMethod::Recompute => {}
            }
        }
        let items: Vec<_> = owned.iter().map(|(l, k, s, m)| (id, *l, *k, *s, m)).collect();
        self.snapshot_batch(&items, blocking)
    }

    /// Stage 2: move queued records into chunk assemblies and write every
    /// chunk that reaches full size. Returns the number of chunks written.
    pub fn drain(&self) -> usize {
        let _drain = lock(&self.drain_lock);
        let records = self.buffer.pop_all();
        if records.is_empty() {
            return 0;
        }
        let mut sessions = lock(&self.sessions);
        let mut written = 0;
        for r in records {
            let Some(s) = sessions.get_mut(&r.session) else { continue };
            let asm = s
                .assemblies
                .entry((r.layer, r.kind))
                .or_insert_with(|| Assembly { first_token: r.start - r.start % CHUNK_TOKENS, data: Vec::new() });
            asm.data.extend_from_slice(&r.data);
            let full = CHUNK_TOKENS * r.width;
            while asm.data.len() >= full {
                let rest = asm.data.split_off(full);
                let chunk = std::mem::replace(&mut asm.data, rest);
                let first = asm.first_token;
                asm.first_token += CHUNK_TOKENS;
                if !s.corrupt {
                    match write_chunk(&self.pool, &mut s.manifest, r.layer, r.kind, first, &chunk, r.width) {
                        Ok(()) => written += 1,
                        Err(_) => s.corrupt = true,
                    }
                }
            }
        }
        self.chunks_written.fetch_add(written as u64, Ordering::Relaxed);
        written
    }

    /// Flush partial chunks and write the final manifest. Idempotent.
    pub fn finalize(&self, id: &str) -> Result<SessionManifest, StorageError> {
        let _drain = lock(&self.drain_lock);
        let pending = self.buffer.pending_for(id);
        if pending > 0 {
            return Err(StorageError::DrainIncomplete { session: id.to_string(), pending });
        }
        let mut sessions = lock(&self.sessions);
        let mut cursors = lock(&self.cursors);
        let s = sessions.get_mut(id).ok_or_else(|| StorageError::UnknownSession(id.to_string()))?;
        let cursor = cursors.get_mut(id).ok_or_else(|| StorageError::UnknownSession(id.to_string()))?;
        if s.corrupt {
            return Err(StorageError::Corrupt(id.to_string()));
        }
        if s.manifest.state == ManifestState::Final {
            return Ok(s.manifest.clone());
        }
        let n = cursor.tokens.len();
        for layer in 0..cursor.plan.n_layers() {
            let kind = match cursor.plan.method(layer) {
                LayerMethod::Hidden => StateKind::Hidden,
                LayerMethod::Kv => StateKind::Kv,
                LayerMethod::Recompute => continue,
            };
            let have = cursor.next.get(&(layer, kind)).copied().unwrap_or(0);
            if have != n {
                return Err(StorageError::Shape(format!("layer {layer} holds {have} of {n} tokens")));
            }
        }
        let mut slots: Vec<Slot> = s.assemblies.keys().copied().collect();
        slots.sort();
        for slot in slots {
            let asm = s.assemblies.remove(&slot).expect("listed");
            if asm.data.is_empty() {
                continue;
            }
            let width = slot.1.width(s.manifest.d_hidden);
            if let Err(e) = write_chunk(&self.pool, &mut s.manifest, slot.0, slot.1, asm.first_token, &asm.data, width) {
                s.corrupt = true;
                return Err(e);
            }
            self.chunks_written.fetch_add(1, Ordering::Relaxed);
        }
        let mut bytes = Vec::with_capacity(n * 4);
        for t in &cursor.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        std::fs::write(self.pool.tokens_path(id), bytes)?;
        s.manifest.chunks.sort_by_key(|c| (c.layer, c.kind, c.chunk_idx));
        s.manifest.n_tokens = n;
        s.manifest.state = ManifestState::Final;
        s.manifest.write_atomic(&self.pool.manifest_path(id))?;
        s.tokens = cursor.tokens.clone();
        cursor.writable = false;
        Ok(s.manifest.clone())
    }

    /// Finalize, waiting for a background daemon to drain this session first.
    pub fn finalize_wait(&self, id: &str) -> Result<SessionManifest, StorageError> {
        loop {
            match self.finalize(id) {
                Err(StorageError::DrainIncomplete { .. }) => {
                    self.buffer.notify();
                    std::thread::sleep(Duration::from_micros(200));
                }
                r => return r,
            }
        }
    }

    pub fn tokens(&self, id: &str) -> Result<Vec<u32>, StorageError> {
        let sessions = lock(&self.sessions);
        let s = sessions.get(id).ok_or_else(|| StorageError::UnknownSession(id.to_string()))?;
        if s.manifest.state != ManifestState::Final {
            return Err(StorageError::NotFinalized(id.to_string()));
        }
        Ok(s.tokens.clone())
    }

    pub fn read_layer(&self, id: &str, layer: usize, kind: StateKind) -> Result<LayerRead, StorageError> {
        let n = self.manifest(id)?.n_tokens;
        self.read_layer_tokens(id, layer, kind, 0..n)
    }

    /// Read rows `range` of one stored layer, one reader thread per device.
    pub fn read_layer_tokens(
        &self,
        id: &str,
        layer: usize,
        kind: StateKind,
        range: Range<usize>,
    ) -> Result<LayerRead, StorageError> {
        let manifest = {
            let sessions = lock(&self.sessions);
            let s = sessions.get(id).ok_or_else(|| StorageError::UnknownSession(id.to_string()))?;
            if s.manifest.state != ManifestState::Final {
                return Err(StorageError::NotFinalized(id.to_string()));
            }
            if s.corrupt {
                return Err(StorageError::Corrupt(id.to_string()));
            }
            s.manifest.clone()
        };
        if range.end > manifest.n_tokens || range.start > range.end {
            return Err(StorageError::Shape(format!("range {range:?} of {} tokens", manifest.n_tokens)));
        }
        let width = kind.width(manifest.d_hidden);
        let stored = layer < manifest.n_layers()
            && matches!(
                (manifest.plan.method(layer), kind),
                (LayerMethod::Hidden, StateKind::Hidden) | (LayerMethod::Kv, StateKind::Kv)
            );
        if !stored {
            return Err(StorageError::Absent { layer, kind });
        }
        let chunks: Vec<&ChunkEntry> = manifest.layer_chunks(layer, kind);
        let wanted: Vec<&ChunkEntry> = chunks
            .into_iter()
            .filter(|c| {
                let s = c.chunk_idx * CHUNK_TOKENS;
                s < range.end && s + c.tokens > range.start
            })
            .collect();
        let mut per_device: Vec<Vec<&ChunkEntry>> = vec![Vec::new(); self.pool.len()];
        for c in &wanted {
            per_device[c.device].push(c);
        }
        let elem = manifest.elem_bytes;
        let results: Vec<Result<Vec<(usize, Vec<f32>)>, StorageError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = per_device
                .iter()
                .filter(|list| !list.is_empty())
                .map(|list| {
                    scope.spawn(move || {
                        let mut out = Vec::with_capacity(list.len());
                        for c in list {
                            let key = ChunkKey { session: id.to_string(), layer, kind, chunk_idx: c.chunk_idx };
                            let bytes = std::fs::read(self.pool.chunk_path(&key))?;
                            if bytes.len() != c.tokens * width * elem {
                                return Err(StorageError::BadManifest(format!(
                                    "{} has {} bytes, expected {}",
                                    key.file_name(),
                                    bytes.len(),
                                    c.tokens * width * elem
                                )));
                            }
                            let mut rows = Vec::with_capacity(c.tokens * width);
                            decode(&bytes, elem, &mut rows);
                            out.push((c.chunk_idx, rows));
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("reader thread panicked")).collect()
        });
        let mut by_chunk: Vec<(usize, Vec<f32>)> = Vec::new();
        for r in results {
            by_chunk.extend(r?);
        }
        by_chunk.sort_by_key(|(i, _)| *i);
        let mut data = Vec::with_capacity(range.len() * width);
        for (idx, rows) in by_chunk {
            let first = idx * CHUNK_TOKENS;
            let lo = range.start.max(first) - first;
            let hi = range.end.min(first + rows.len() / width) - first;
            data.extend_from_slice(&rows[lo * width..hi * width]);
        }
        let mut bytes_per_device = vec![0u64; self.pool.len()];
        for c in &wanted {
            bytes_per_device[c.device] += (c.tokens * width * elem) as u64;
        }
        let sim_seconds = match self.pool.throttle() {
            Some(bw) => bytes_per_device.iter().map(|&b| b as f64 / bw).fold(0.0, f64::max),
            None => 0.0,
        };
        Ok(LayerRead { data: Matrix::from_vec(range.len(), width, data).map_err(|e| StorageError::Shape(e.to_string()))?, bytes_per_device, sim_seconds })
    }
}

fn write_chunk(
    pool: &DevicePool,
    manifest: &mut SessionManifest,
    layer: usize,
    kind: StateKind,
    first_token: usize,
    rows: &[f32],
    width: usize,
) -> Result<(), StorageError> {
    let key = ChunkKey { session: manifest.session_id.clone(), layer, kind, chunk_idx: first_token / CHUNK_TOKENS };
    let mut bytes = Vec::with_capacity(rows.len() * manifest.elem_bytes);
    encode(rows, manifest.elem_bytes, &mut bytes);
    std::fs::write(pool.chunk_path(&key), bytes)?;
    manifest.chunks.retain(|c| !(c.layer == layer && c.kind == kind && c.chunk_idx == key.chunk_idx));
    manifest.chunks.push(ChunkEntry {
        layer,
        kind,
        chunk_idx: key.chunk_idx,
        device: device_for_chunk(&key, pool.len()),
        tokens: rows.len() / width,
    });
    Ok(())
}

/// K then V per token, for `positions` of one cached layer.
pub(crate) fn kv_rows(kv: &KvCache, layer: usize, positions: Range<usize>) -> Result<Matrix, StorageError> {
    let d = kv.d_hidden();
    let l = kv.layer(layer);
    if positions.end > l.len {
        return Err(StorageError::Shape(format!("layer {layer} caches {} tokens, wanted {positions:?}", l.len)));
    }
    let mut out = Matrix::zeros(positions.len(), 2 * d);
    for (r, p) in positions.enumerate() {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(&l.k[p * d..(p + 1) * d]);
        row[d..].copy_from_slice(&l.v[p * d..(p + 1) * d]);
    }
    Ok(out)
}

/// Split `n × 2d` K/V rows into separate K and V matrices.
pub fn split_kv(rows: &Matrix) -> (Matrix, Matrix) {
    let d = rows.cols() / 2;
    let mut k = Matrix::zeros(rows.rows(), d);
    let mut v = Matrix::zeros(rows.rows(), d);
    for r in 0..rows.rows() {
        k.row_mut(r).copy_from_slice(&rows.row(r)[..d]);
        v.row_mut(r).copy_from_slice(&rows.row(r)[d..]);
    }
    (k, v)
}

/// Background drain worker.
pub struct DaemonHandle {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<usize>>,
}

impl DaemonHandle {
    /// Stop after a final drain; returns the chunks it wrote.
    pub fn stop(mut self) -> usize {
        self.shutdown()
    }

    fn shutdown(&mut self) -> usize {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.take().map_or(0, |h| h.join().unwrap_or(0))
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn spawn_daemon(store: Arc<SessionStore>) -> DaemonHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let handle = std::thread::spawn(move || {
        let mut total = 0;
        while !flag.load(Ordering::Relaxed) {
            if store.buffer().wait_nonempty(Duration::from_millis(5)) {
                total += store.drain();
            }
        }
        total + store.drain()
    });
    DaemonHandle { stop, handle: Some(handle) }
}
