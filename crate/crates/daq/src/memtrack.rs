//! Heap high-water-mark tracking for the training-memory benchmarks.
//!
//! A wrapping global allocator counts live bytes and their peak. Binaries
//! that want measurements install it with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: daq::memtrack::TrackingAllocator = daq::memtrack::TrackingAllocator;
//! ```
//!
//! [`measure_peak_memory`] resets the peak, runs one training step, and
//! reports the highest number of live heap bytes seen during it. Without
//! the allocator installed it returns an explicit unsupported error rather
//! than a silent zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use crate::error::{Error, Result};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

pub struct TrackingAllocator;

impl TrackingAllocator {
    fn record_alloc(size: usize) {
        INSTALLED.store(true, Ordering::Relaxed);
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    fn record_dealloc(size: usize) {
        CURRENT.fetch_sub(size, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            Self::record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        Self::record_dealloc(layout.size());
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            Self::record_alloc(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            Self::record_dealloc(layout.size());
            Self::record_alloc(new_size);
        }
        p
    }
}

pub fn is_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Set the peak to the current live size; subsequent peaks reflect only
/// what happens afterwards.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Run `step` and return the peak number of live heap bytes observed while
/// it executed. The caller must ensure nothing else allocates concurrently.
pub fn measure_peak_memory(step: impl FnOnce() -> Result<()>) -> Result<u64> {
    // Touch the heap so a freshly started process registers the allocator.
    let probe = vec![0u8; 1];
    drop(probe);
    if !is_installed() {
        return Err(Error::MeasurementUnsupported);
    }
    reset_peak();
    step()?;
    Ok(peak_bytes() as u64)
}
