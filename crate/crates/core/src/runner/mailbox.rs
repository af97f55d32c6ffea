use std::collections::VecDeque;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

/// Blocking FIFO that can be closed; closing wakes every waiter.
#[derive(Debug)]
pub struct Mailbox<T> {
    inner: Mutex<(VecDeque<T>, bool)>,
    cond: Condvar,
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Self {
            inner: Mutex::new((VecDeque::new(), false)),
            cond: Condvar::new(),
        }
    }
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false (and drops the item) once closed.
    pub fn push(&self, item: T) -> bool {
        let mut g = self.inner.lock();
        if g.1 {
            return false;
        }
        g.0.push_back(item);
        drop(g);
        self.cond.notify_all();
        true
    }

    /// Next item, or `None` on timeout or once closed and drained.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<T> {
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock();
        loop {
            if let Some(item) = g.0.pop_front() {
                return Some(item);
            }
            if g.1 {
                return None;
            }
            if self.cond.wait_until(&mut g, deadline).timed_out() {
                return g.0.pop_front();
            }
        }
    }

    pub fn drain(&self) -> Vec<T> {
        self.inner.lock().0.drain(..).collect()
    }

    pub fn close(&self) {
        self.inner.lock().1 = true;
        self.cond.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().1
    }

    /// Sleeps up to `timeout`, returning early (true) if closed.
    pub fn wait_closed(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock();
        while !g.1 {
            if self.cond.wait_until(&mut g, deadline).timed_out() {
                break;
            }
        }
        g.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn fifo_and_close() {
        let m = Mailbox::new();
        m.push(1);
        m.push(2);
        assert_eq!(m.recv_timeout(Duration::ZERO), Some(1));
        m.close();
        assert!(!m.push(3));
        assert_eq!(m.recv_timeout(Duration::from_secs(5)), Some(2));
        assert_eq!(m.recv_timeout(Duration::from_secs(5)), None);
    }

    #[test]
    fn close_wakes_waiter() {
        let m: Arc<Mailbox<u8>> = Arc::new(Mailbox::new());
        let m2 = m.clone();
        let h = std::thread::spawn(move || m2.recv_timeout(Duration::from_secs(30)));
        std::thread::sleep(Duration::from_millis(20));
        m.close();
        assert_eq!(h.join().unwrap(), None);
    }
}
