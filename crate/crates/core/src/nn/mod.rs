//! Minimal neural-network engine: NHWC tensors, layer kernels with explicit
//! backward passes, cross-entropy loss, Adam and Glorot initialisation.

pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod optim;
mod scalar;
mod tensor;

pub use layers::{LayerSpec, Mode};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Serve every allocation from the process heap and never hand freed memory
/// back to the kernel. Activations are tens of megabytes and get reallocated
/// every step, so the default mmap/munmap churn costs a page fault per 4 KiB.
/// Process-wide; safe to call repeatedly. A no-op off glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
