//! Process-level tuning for long training runs.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Keeps freed buffers in the heap instead of returning them to the OS.
///
/// Every pass allocates and frees the same set of multi-megabyte buffers;
/// with glibc's default thresholds each one is a fresh `mmap` and every page
/// faults again on first touch. Idempotent; a no-op off glibc.
pub fn tune_allocator() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds and is called
        // once, before any concurrent allocation this crate performs.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
