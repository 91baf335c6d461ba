//! Small worker pool for asynchronous storage reads.

use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Condvar, Mutex};

struct TicketInner<T> {
    value: Mutex<Option<T>>,
    ready: Condvar,
}

/// Completion slot for one asynchronous operation.
pub struct Ticket<T> {
    inner: Arc<TicketInner<T>>,
}

impl<T> Clone for Ticket<T> {
    fn clone(&self) -> Self {
        Ticket {
            inner: self.inner.clone(),
        }
    }
}

impl<T> std::fmt::Debug for Ticket<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Ticket(ready={})", self.is_ready())
    }
}

impl<T> Ticket<T> {
    pub fn new() -> Self {
        Ticket {
            inner: Arc::new(TicketInner {
                value: Mutex::new(None),
                ready: Condvar::new(),
            }),
        }
    }

    pub fn complete(&self, value: T) {
        *self.inner.value.lock() = Some(value);
        self.inner.ready.notify_all();
    }

    pub fn is_ready(&self) -> bool {
        self.inner.value.lock().is_some()
    }

    pub fn try_take(&self) -> Option<T> {
        self.inner.value.lock().take()
    }

    pub fn wait(&self) -> T {
        let mut guard = self.inner.value.lock();
        loop {
            if let Some(v) = guard.take() {
                return v;
            }
            self.inner.ready.wait(&mut guard);
        }
    }
}

impl<T> Default for Ticket<T> {
    fn default() -> Self {
        Self::new()
    }
}

type Job = Box<dyn FnOnce() + Send + 'static>;

pub struct IoPool {
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for IoPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "IoPool({} workers)", self.workers.len())
    }
}

impl IoPool {
    pub fn new(name: &str, threads: usize) -> Self {
        let (tx, rx): (Sender<Job>, Receiver<Job>) = crossbeam_channel::unbounded();
        let workers = (0..threads.max(1))
            .map(|i| {
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("{name}-io-{i}"))
                    .spawn(move || {
                        while let Ok(job) = rx.recv() {
                            job();
                        }
                    })
                    .expect("spawn io worker")
            })
            .collect();
        IoPool {
            tx: Some(tx),
            workers,
        }
    }

    pub fn submit<T, F>(&self, f: F) -> Ticket<T>
    where
        T: Send + 'static,
        F: FnOnce() -> T + Send + 'static,
    {
        let ticket = Ticket::new();
        let t = ticket.clone();
        let job: Job = Box::new(move || t.complete(f()));
        if let Some(tx) = &self.tx {
            if let Err(err) = tx.send(job) {
                // Pool is shutting down; run inline so the ticket still completes.
                (err.into_inner())();
            }
        }
        ticket
    }
}

impl Drop for IoPool {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
