use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use super::{StateKind, StorageError};

pub const DEFAULT_BUFFER_BYTES: usize = 256 << 20;

/// Rows of one layer's state for consecutive tokens of one session.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub session: String,
    pub layer: usize,
    pub kind: StateKind,
    /// Position of the first row.
    pub start: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Persisted size, charged against the buffer capacity.
    pub bytes: usize,
}

impl Record {
    pub fn n_tokens(&self) -> usize {
        self.data.len() / self.width
    }
}

struct Inner {
    queue: VecDeque<Record>,
    used: usize,
}

/// Bounded FIFO between the inference thread and the drain daemon.
pub struct SnapshotBuffer {
    inner: Mutex<Inner>,
    changed: Condvar,
    capacity: usize,
    stalls: AtomicU64,
}

impl SnapshotBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(Inner { queue: VecDeque::new(), used: 0 }),
            changed: Condvar::new(),
            capacity,
            stalls: AtomicU64::new(0),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used_bytes(&self) -> usize {
        self.lock().used
    }

    pub fn len(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().queue.is_empty()
    }

    /// Times a blocking push had to wait for space.
    pub fn stalls(&self) -> u64 {
        self.stalls.load(Ordering::Relaxed)
    }

    pub fn pending_for(&self, session: &str) -> usize {
        self.lock().queue.iter().filter(|r| r.session == session).count()
    }

    /// Enqueue all records or none.
    pub fn try_push(&self, records: Vec<Record>) -> Result<(), StorageError> {
        let needed: usize = records.iter().map(|r| r.bytes).sum();
        let mut g = self.lock();
        let free = self.capacity - g.used;
        if needed > free {
            return Err(StorageError::Backpressure { needed, free });
        }
        g.used += needed;
        g.queue.extend(records);
        drop(g);
        self.changed.notify_all();
        Ok(())
    }

    /// Enqueue, waiting for the daemon to free space if needed. Returns whether
    /// the caller stalled.
    pub fn push_blocking(&self, records: Vec<Record>) -> Result<bool, StorageError> {
        let needed: usize = records.iter().map(|r| r.bytes).sum();
        if needed > self.capacity {
            return Err(StorageError::Backpressure { needed, free: self.capacity });
        }
        let mut g = self.lock();
        let mut stalled = false;
        while self.capacity - g.used < needed {
            if !stalled {
                stalled = true;
                self.stalls.fetch_add(1, Ordering::Relaxed);
            }
            g = self.changed.wait(g).unwrap_or_else(|e| e.into_inner());
        }
        g.used += needed;
        g.queue.extend(records);
        drop(g);
        self.changed.notify_all();
        Ok(stalled)
    }

    /// Take every queued record in enqueue order.
    pub fn pop_all(&self) -> Vec<Record> {
        let mut g = self.lock();
        g.used = 0;
        let out: Vec<Record> = g.queue.drain(..).collect();
        drop(g);
        self.changed.notify_all();
        out
    }

    /// Block until something is queued or the timeout passes.
    pub fn wait_nonempty(&self, timeout: Duration) -> bool {
        let g = self.lock();
        let (g, _) = self
            .changed
            .wait_timeout_while(g, timeout, |i| i.queue.is_empty())
            .unwrap_or_else(|e| e.into_inner());
        !g.queue.is_empty()
    }

    pub(crate) fn notify(&self) {
        self.changed.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn rec(session: &str, bytes: usize) -> Record {
        Record { session: session.into(), layer: 0, kind: StateKind::Hidden, start: 0, width: 1, data: vec![0.0], bytes }
    }

    #[test]
    fn backpressure_when_full() {
        let b = SnapshotBuffer::new(100);
        b.try_push(vec![rec("a", 60)]).unwrap();
        assert!(matches!(b.try_push(vec![rec("a", 50)]), Err(StorageError::Backpressure { needed: 50, free: 40 })));
        assert_eq!(b.len(), 1);
        assert_eq!(b.pop_all().len(), 1);
        assert_eq!(b.used_bytes(), 0);
        b.try_push(vec![rec("a", 50), rec("b", 50)]).unwrap();
        assert_eq!(b.pending_for("b"), 1);
    }

    #[test]
    fn blocking_push_waits_for_drain_and_counts_stall() {
        let b = Arc::new(SnapshotBuffer::new(100));
        b.try_push(vec![rec("a", 80)]).unwrap();
        let b2 = b.clone();
        let h = std::thread::spawn(move || b2.push_blocking(vec![rec("a", 50)]).unwrap());
        while b.stalls() == 0 {
            std::thread::yield_now();
        }
        b.pop_all();
        assert!(h.join().unwrap());
        assert_eq!(b.used_bytes(), 50);
        assert!(b.push_blocking(vec![rec("a", 500)]).is_err());
    }
}
