use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fmuda_core::fednode::Scheduler;

/// Runs jobs on at most `workers` scoped threads. Results keep job order,
/// so the outcome never depends on which thread finished first.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub workers: usize,
}

impl Threaded {
    pub fn new(workers: usize) -> Self {
        Self { workers: workers.max(1) }
    }
}

impl Scheduler for Threaded {
    fn run<T, F>(&self, jobs: Vec<F>) -> Vec<T>
    where
        T: Send,
        F: FnOnce() -> T + Send,
    {
        let n = jobs.len();
        let slots: Vec<Mutex<Option<F>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
        let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..self.workers.min(n) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let job = slots[i].lock().expect("job slot").take().expect("each job runs once");
                    *results[i].lock().expect("result slot") = Some(job());
                });
            }
        });
        results.into_iter().map(|r| r.into_inner().expect("result slot").expect("every job ran")).collect()
    }
}
