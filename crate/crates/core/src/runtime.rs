//! Process-level tuning for long training runs.

/// Keeps freed large blocks in the heap instead of returning them to the
/// OS. Activation tensors of a 64^3 batch sit right at glibc's default mmap
/// threshold, so without this every tensor is a fresh mapping and pays for
/// page faults on first touch. Call once at program start; a no-op outside
/// glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
