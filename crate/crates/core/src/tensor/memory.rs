//! Live activation byte accounting.
//!
//! Every buffer produced by an operation (forward values, values saved for
//! backward, gradients flowing through backward) registers its size with the
//! tracker that is current on the allocating thread. Parameter storage is not
//! tracked. Trackers are reference counted and each buffer remembers the
//! tracker it was charged to, so a buffer dropped on another thread still
//! releases its bytes from the right account.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

#[derive(Debug, Default)]
pub struct MemTracker {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl MemTracker {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::Acquire)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Acquire)
    }

    fn charge(&self, bytes: usize) {
        let now = self.live.fetch_add(bytes, Ordering::AcqRel) + bytes;
        self.peak.fetch_max(now, Ordering::AcqRel);
    }

    fn release(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::AcqRel);
    }
}

fn global() -> Arc<MemTracker> {
    static GLOBAL: OnceLock<Arc<MemTracker>> = OnceLock::new();
    GLOBAL.get_or_init(MemTracker::new).clone()
}

thread_local! {
    static CURRENT: RefCell<Option<Arc<MemTracker>>> = const { RefCell::new(None) };
}

pub fn current_tracker() -> Arc<MemTracker> {
    CURRENT.with(|c| c.borrow().clone()).unwrap_or_else(global)
}

/// Runs `f` with a fresh tracker installed on this thread and returns the
/// result together with the high-water mark of bytes charged during `f`.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let tracker = MemTracker::new();
    let out = with_tracker(tracker.clone(), f);
    (out, tracker.peak())
}

/// Runs `f` with `tracker` charged for this thread's allocations.
pub fn with_tracker<R>(tracker: Arc<MemTracker>, f: impl FnOnce() -> R) -> R {
    let previous = CURRENT.with(|c| c.borrow_mut().replace(tracker));
    struct Restore(Option<Arc<MemTracker>>);
    impl Drop for Restore {
        fn drop(&mut self) {
            let prev = self.0.take();
            CURRENT.with(|c| *c.borrow_mut() = prev);
        }
    }
    let _guard = Restore(previous);
    f()
}

/// A vector whose byte size is charged to a [`MemTracker`] while it lives.
#[derive(Debug)]
pub struct Buffer<T> {
    data: Vec<T>,
    tracker: Option<Arc<MemTracker>>,
}

impl<T> Buffer<T> {
    pub fn tracked(data: Vec<T>) -> Self {
        let tracker = current_tracker();
        tracker.charge(std::mem::size_of_val(data.as_slice()));
        Self {
            data,
            tracker: Some(tracker),
        }
    }

    pub fn untracked(data: Vec<T>) -> Self {
        Self {
            data,
            tracker: None,
        }
    }

    pub fn into_vec(mut self) -> Vec<T> {
        self.release();
        std::mem::take(&mut self.data)
    }

    fn release(&mut self) {
        if let Some(t) = self.tracker.take() {
            t.release(std::mem::size_of_val(self.data.as_slice()));
        }
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        match self.tracker {
            Some(_) => Self::tracked(self.data.clone()),
            None => Self::untracked(self.data.clone()),
        }
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        self.release();
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noop_measures_zero() {
        let (_, peak) = measure_peak(|| ());
        assert_eq!(peak, 0);
    }

    #[test]
    fn peak_is_high_water_mark() {
        let (_, peak) = measure_peak(|| {
            let a = Buffer::tracked(vec![0f32; 100]);
            let b = Buffer::tracked(vec![0f32; 50]);
            drop(a);
            let _c = Buffer::tracked(vec![0f32; 20]);
            drop(b);
        });
        assert_eq!(peak, 600);
    }

    #[test]
    fn release_follows_original_tracker() {
        let (buf, peak) = measure_peak(|| Buffer::tracked(vec![0f64; 8]));
        assert_eq!(peak, 64);
        let (_, inner) = measure_peak(move || drop(buf));
        assert_eq!(inner, 0);
    }

    #[test]
    fn into_vec_releases() {
        let (_, peak) = measure_peak(|| {
            let t = current_tracker();
            let v = Buffer::tracked(vec![1u8; 10]).into_vec();
            assert_eq!(t.live(), 0);
            v.len()
        });
        assert_eq!(peak, 10);
    }
}
