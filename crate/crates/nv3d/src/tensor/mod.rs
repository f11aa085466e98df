//! Dense tensor storage with allocation accounting.
//!
//! Tensors are immutable once built: the backing buffer sits behind an `Arc`,
//! so clones are cheap and sharing across threads is safe. Every buffer
//! allocation and release is recorded in a process-wide counter, which is what
//! the bench command and the memory-bound checks read instead of OS RSS.

mod graph;
mod ops;

pub use graph::{Gradients, Graph, NodeId};
pub use ops::*;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type tag, mirrored in file headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Floating-point element type usable in tensors. f64 is the checking dtype,
/// f32 the training dtype; everything in the crate is generic over both.
pub trait Scalar:
    num_traits::Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    // The convolution kernels dispatch through these so each concrete
    // version is compiled exactly once, in this crate. Left to generic
    // instantiation, every downstream binary re-optimizes its own copy and
    // the inliner does not always make the same choices — the same kernel
    // measured up to 3x slower in one executable than another.
    #[doc(hidden)]
    fn conv3d_fwd(
        input: &Tensor<Self>,
        kernel: &Tensor<Self>,
        bias: &Tensor<Self>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<Self>>;
    #[doc(hidden)]
    #[allow(clippy::type_complexity)]
    fn conv3d_bwd(
        input: &Tensor<Self>,
        kernel: &Tensor<Self>,
        grad_out: &Tensor<Self>,
        stride: usize,
        padding: usize,
        need_input: bool,
    ) -> Result<(Option<Tensor<Self>>, Tensor<Self>, Tensor<Self>)>;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(never)]
    fn conv3d_fwd(
        input: &Tensor<f32>,
        kernel: &Tensor<f32>,
        bias: &Tensor<f32>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<f32>> {
        ops::conv3d_body(input, kernel, bias, stride, padding)
    }
    #[inline(never)]
    fn conv3d_bwd(
        input: &Tensor<f32>,
        kernel: &Tensor<f32>,
        grad_out: &Tensor<f32>,
        stride: usize,
        padding: usize,
        need_input: bool,
    ) -> Result<(Option<Tensor<f32>>, Tensor<f32>, Tensor<f32>)> {
        ops::conv3d_backward_body(input, kernel, grad_out, stride, padding, need_input)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(never)]
    fn conv3d_fwd(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<f64>> {
        ops::conv3d_body(input, kernel, bias, stride, padding)
    }
    #[inline(never)]
    fn conv3d_bwd(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        grad_out: &Tensor<f64>,
        stride: usize,
        padding: usize,
        need_input: bool,
    ) -> Result<(Option<Tensor<f64>>, Tensor<f64>, Tensor<f64>)> {
        ops::conv3d_backward_body(input, kernel, grad_out, stride, padding, need_input)
    }
}

// ---------------------------------------------------------------------------
// Allocation accounting
// ---------------------------------------------------------------------------

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

/// Snapshot of the tensor allocation counter.
#[derive(Debug, Clone, Copy)]
pub struct MemStats {
    /// Bytes currently held by live tensor buffers.
    pub live_bytes: usize,
    /// High-water mark since the last [`reset_peak`].
    pub peak_bytes: usize,
}

/// Current live/peak tensor bytes.
pub fn mem_stats() -> MemStats {
    MemStats {
        live_bytes: LIVE_BYTES.load(Ordering::SeqCst),
        peak_bytes: PEAK_BYTES.load(Ordering::SeqCst),
    }
}

/// Collapse the peak down to the current live total and return that baseline.
/// Measurements of a region are `peak - baseline` after running it.
pub fn reset_peak() -> usize {
    let live = LIVE_BYTES.load(Ordering::SeqCst);
    PEAK_BYTES.store(live, Ordering::SeqCst);
    live
}

fn record_alloc(bytes: usize) {
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::SeqCst) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::SeqCst);
}

fn record_free(bytes: usize) {
    LIVE_BYTES.fetch_sub(bytes, Ordering::SeqCst);
}

/// Owned buffer; registers its size with the counter for its whole lifetime.
struct Storage<T> {
    data: Vec<T>,
    bytes: usize,
}

impl<T> Storage<T> {
    fn new(data: Vec<T>) -> Self {
        let bytes = data.capacity() * std::mem::size_of::<T>();
        record_alloc(bytes);
        Storage { data, bytes }
    }
}

impl<T> Drop for Storage<T> {
    fn drop(&mut self) {
        record_free(self.bytes);
    }
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Maximum rank the engine needs: conv kernels are rank 5.
pub const MAX_RANK: usize = 5;

/// Dense row-major tensor (last axis fastest). Immutable after construction.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    storage: Arc<Storage<T>>,
}

/// Semantic alias: a rank-4 `[channels, depth, height, width]` tensor.
pub type Volume<T> = Tensor<T>;

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape: Vec<usize> = shape.into();
        if shape.len() > MAX_RANK {
            return Err(Error::invalid(format!(
                "rank {} exceeds supported maximum {MAX_RANK}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements but buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            storage: Arc::new(Storage::new(data)),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape: Vec<usize> = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            storage: Arc::new(Storage::new(vec![T::zero(); numel])),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape: Vec<usize> = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            storage: Arc::new(Storage::new(vec![value; numel])),
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            storage: Arc::new(Storage::new(vec![value])),
        }
    }

    /// Build from a function of the flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape: Vec<usize> = shape.into();
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel).map(&mut f).collect();
        Tensor {
            shape,
            storage: Arc::new(Storage::new(data)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.storage.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.storage.data[0]
    }

    /// Same buffer under a different shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot view shape {:?} as {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: Arc::clone(&self.storage),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        Tensor {
            shape: self.shape.clone(),
            storage: Arc::new(Storage::new(data)),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data().iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            storage: Arc::new(Storage::new(data)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "{context}: tensor of shape {:?} contains NaN or Inf",
                self.shape
            )))
        }
    }

    /// Largest absolute element difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// True when both tensors hold bit-identical data and equal shapes.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| Scalar::to_f64(*a).to_bits() == Scalar::to_f64(*b).to_bits())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::DTYPE.name(), self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_rejected() {
        let err = Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn rank_above_five_is_rejected() {
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    // Exact live/peak byte accounting is asserted in the dedicated memory
    // integration test, which owns the process-global counter. Unit tests here
    // only check properties that survive concurrent allocation by other tests.

    #[test]
    fn clones_share_storage() {
        let a = Tensor::<f32>::zeros(&[8, 8, 8]);
        let b = a.clone();
        assert!(Arc::ptr_eq(&a.storage, &b.storage));
    }

    #[test]
    fn counters_cover_a_held_allocation() {
        let bytes = 16 * 16 * 16 * 8;
        let _a = Tensor::<f64>::zeros(&[16, 16, 16]);
        // other tests may allocate/free concurrently, but while _a is held the
        // global live count includes it and the peak can only have grown
        let s = mem_stats();
        assert!(s.live_bytes >= bytes);
        assert!(s.peak_bytes >= bytes);
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::<f64>::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), 2.5);
    }
}
