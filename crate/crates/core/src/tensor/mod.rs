//! Dense tensors and a dynamic reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain value type (shape + contiguous data + optional
//! gradient accumulator). Computation happens on a [`Graph`], which records
//! every primitive op in execution order and replays them in reverse on
//! [`Graph::backward`]. A graph lives for one forward/backward pass and is
//! dropped afterwards.

mod gemm;
mod graph;
mod gradcheck;
mod shape;

pub use gemm::gemm;
pub use graph::{BinaryKind, ConvGeom, Graph, ReduceKind, UnaryKind, Var};
pub use gradcheck::finite_diff_check;
pub use shape::{broadcast_shape, numel, strides_of};

use crate::error::{shape_err, Result};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Real scalar usable as tensor element. Implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c (=|+=) op(a) · op(b)` with `op(a)` of shape `m×k`, `op(b)` of shape `k×n`,
    /// all row-major. `trans_a` means `a` is stored as `k×m`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        let sa = if trans_a { (1, m) } else { (k, 1) };
        let sb = if trans_b { (1, k) } else { (n, 1) };
        Self::gemm_strided(m, k, n, a, sa, b, sb, c, n, accumulate)
    }

    /// General form of [`Float::gemm_raw`]: `a` and `b` are addressed by
    /// (row, column) strides, `c` by its row stride with unit column stride.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        c_row_stride: usize,
        accumulate: bool,
    );

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_float {
    ($t:ty, $kernel:path) => {
        impl Float for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (usize, usize),
                b: &[Self],
                (rsb, csb): (usize, usize),
                c: &mut [Self],
                rsc: usize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
                assert!(rsc >= n && c.len() > last(m, n, rsc, 1));
                if k > 0 {
                    assert!(a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb));
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every addressed element lies within the slices
                // (checked above) and rows of `c` do not overlap.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        1,
                    );
                }
            }

            fn lit(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// N-dimensional dense array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero extent in shape {shape:?}"));
        }
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {} elements, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(shape, vec![value; numel(shape)]).expect("valid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::new(shape, data).expect("valid shape")
    }

    /// Marks this tensor as a trainable leaf.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    /// Element-type conversion (drops the gradient).
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Row `i` of the leading axis, as a contiguous slice.
    pub fn row(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(numel(&shape));
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err!(
                    "stack of mismatched shapes {:?} vs {:?}",
                    t.shape,
                    first.shape
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Self::new(&shape, data)
    }
}
