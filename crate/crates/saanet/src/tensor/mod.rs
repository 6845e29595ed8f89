//! Dense tensor values with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to a flat row-major buffer of
//! `f64` scalars plus an optional gradient accumulator. Operations record
//! their adjoints on a [`Tape`]; calling [`Tape::backward`] replays the
//! recorded closures in reverse and fills in the gradient of every tensor
//! that participates in the computation.
//!
//! Storage is 64-bit so that central finite differences stay tight enough to
//! validate every gradient; the on-disk format ([`io`]) remains 32-bit.
//!
//! A tape and the tensors recorded on it are confined to a single thread
//! (the handles are `!Send`); completed values can be exported as plain
//! `Vec<f64>` buffers for cross-thread use.

mod check;
mod conv;
mod io;
mod ops;

pub use check::{grad_check, grad_check_params, GradCheckReport};
pub use io::{read_saat, write_saat};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Dense n-dimensional array of real scalars with optional gradient tracking.
///
/// Cloning is cheap (reference-counted handle). The invariant
/// `shape.iter().product() == data.len()` holds for every constructed value,
/// and a gradient buffer, when present, always matches the data length.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::new_raw(shape, data, false))
    }

    fn new_raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub(crate) fn result_of(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Self::new_raw(shape, data, requires_grad)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_raw(shape, vec![0.0; numel], false)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_raw(shape, vec![value; numel], false)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self::new_raw(Vec::new(), vec![value], false)
    }

    /// Normally distributed values, mean 0, the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| gauss(rng) * std).collect();
        Self::new_raw(shape, data, false)
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new_raw(shape, data, false)
    }

    /// Marks this tensor as a trainable leaf. Consumes and rewraps the handle.
    pub fn requiring_grad(self) -> Self {
        let shape = self.inner.shape.clone();
        let data = self.inner.data.borrow().clone();
        Self::new_raw(shape, data, true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor with {} elements", data.len());
        data[0]
    }

    pub fn get(&self, index: usize) -> f64 {
        self.inner.data.borrow()[index]
    }

    /// Overwrites the stored data. Valid only between passes (leaves).
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// Adds `delta` to one coordinate. Used by optimizers and the
    /// finite-difference oracle.
    pub fn nudge(&self, index: usize, delta: f64) {
        self.inner.data.borrow_mut()[index] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Scales the stored gradient in place; a no-op when none is set.
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for gi in g.iter_mut() {
                *gi *= factor;
            }
        }
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    pub(crate) fn grad_clone(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn borrow_data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Detached copy: same values, no gradient tracking.
    pub fn detached(&self) -> Tensor {
        Self::new_raw(self.inner.shape.clone(), self.to_vec(), false)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.inner.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..{}]={:?}{})",
            self.inner.shape,
            self.inner.requires_grad,
            preview.len(),
            preview,
            if data.len() > 8 { ", ..." } else { "" }
        )
    }
}

/// Standard normal via Box–Muller on the ChaCha stream. Deterministic for a
/// fixed seed on one platform.
pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Ordered record of the primitive operations of one forward pass.
///
/// Each op pushes a closure that propagates the adjoint from its output to
/// its inputs. [`Tape::backward`] replays the closures in reverse order, so
/// every recorded node is visited exactly once per pass. The tape is meant to
/// live for a single forward/backward cycle and be dropped afterwards.
pub struct Tape {
    /// (op output, adjoint closure) in forward order.
    records: RefCell<Vec<(Tensor, Box<dyn Fn()>)>>,
    recording: bool,
    samples: Cell<u64>,
    rng: RefCell<Option<ChaCha8Rng>>,
}

impl Tape {
    /// A recording tape for a training pass.
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            recording: true,
            samples: Cell::new(0),
            rng: RefCell::new(None),
        }
    }

    /// A non-recording tape for inference. Ops run forward-only.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    /// Attaches a stochasticity source; required for dropout rates > 0.
    pub fn with_rng(self, rng: ChaCha8Rng) -> Self {
        *self.rng.borrow_mut() = Some(rng);
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded adjoint nodes.
    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total interpolated samples taken by sampling ops on this tape.
    pub fn sample_count(&self) -> u64 {
        self.samples.get()
    }

    pub(crate) fn add_samples(&self, n: u64) {
        self.samples.set(self.samples.get() + n);
    }

    pub(crate) fn next_uniform(&self) -> Option<f64> {
        self.rng.borrow_mut().as_mut().map(|r| r.gen_range(0.0..1.0))
    }

    /// Records an op output and its adjoint closure. The output handle lets
    /// `backward` clear stale intermediate gradients from a previous pass.
    pub(crate) fn record(&self, output: &Tensor, backward: impl Fn() + 'static) {
        self.records.borrow_mut().push((output.clone(), Box::new(backward)));
    }

    pub(crate) fn should_record(&self, inputs_require_grad: bool) -> bool {
        self.recording && inputs_require_grad
    }

    /// Seeds the root with gradient 1 and replays all adjoints in reverse.
    ///
    /// The root must be a one-element tensor produced under this tape.
    /// Gradients of op outputs (intermediates) are cleared first, so a second
    /// call — after the caller resets leaf gradients — reproduces the same
    /// result; leaf gradients accumulate across calls by design.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let records = self.records.borrow();
        for (output, _) in records.iter() {
            output.zero_grad();
        }
        root.accumulate_grad(&[1.0]);
        for (_, adjoint) in records.iter().rev() {
            adjoint();
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Splits a shape at `axis` into (outer, len, inner) extents for lane
/// iteration over row-major data.
pub(crate) fn axis_lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
