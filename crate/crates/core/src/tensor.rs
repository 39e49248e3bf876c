//! Dense 4-D tensors in (n, c, h, w) row-major layout with an optional
//! gradient buffer. This is the substrate every operator builds on: no
//! broadcasting, no views, no autodiff tape — shape adaptation is always
//! explicit and every operator exposes its own forward/backward pair.

use std::fmt;
use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Element precision of a tensor. Training runs in 32-bit, gradient checks
/// in 64-bit.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Byte width of one element; doubles as the on-disk precision tag.
    pub fn byte(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_byte(b: u8) -> Result<Precision> {
        match b {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            other => Err(Error::Format(format!("unknown precision byte {other}"))),
        }
    }
}

/// Floating-point element type usable in tensors. Implemented for f32/f64.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// (batch, channel, height, width) extents.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D tensor. `grad`, when allocated, always matches `data` in length.
#[derive(Clone, Debug)]
pub struct Tensor4<T: Scalar> {
    shape: Shape4,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Tensor4<T> {
        Tensor4 {
            shape,
            data: vec![T::ZERO; shape.len()],
            grad: None,
        }
    }

    pub fn filled(shape: Shape4, v: T) -> Tensor4<T> {
        Tensor4 {
            shape,
            data: vec![v; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Tensor4<T>> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                context: "Tensor4::from_vec",
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    /// Allocate the gradient buffer at construction; used for parameters.
    pub fn with_grad(mut self) -> Tensor4<T> {
        self.ensure_grad();
        self
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// One (n, c) spatial plane as a contiguous h*w slice.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let base = (n * self.shape.c + c) * hw;
        &self.data[base..base + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape.h * self.shape.w;
        let base = (n * self.shape.c + c) * hw;
        &mut self.data[base..base + hw]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocating zeros on first use.
    pub fn ensure_grad(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::ZERO; self.data.len()]);
        }
        self.grad.as_mut().unwrap().as_mut_slice()
    }

    /// Simultaneous read access to values and write access to the gradient
    /// buffer; backward passes read weights while accumulating their grads.
    pub fn data_and_grad_mut(&mut self) -> (&[T], &mut [T]) {
        if self.grad.is_none() {
            self.grad = Some(vec![T::ZERO; self.data.len()]);
        }
        (
            self.data.as_slice(),
            self.grad.as_mut().unwrap().as_mut_slice(),
        )
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor4<T> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn assert_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context })
        }
    }

    /// Convert element precision, e.g. an f32 scene into an f64 grad check.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }
}

fn check_same_shape<T: Scalar>(
    context: &'static str,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

/// out[i] = a[i] + b[i].
pub fn elementwise_add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape("elementwise_add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor4::from_vec(a.shape(), data)
}

/// Addition routes the upstream gradient unchanged to both inputs.
pub fn elementwise_add_backward<T: Scalar>(upstream: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    (upstream.clone(), upstream.clone())
}

/// out[i] = a[i] * b[i].
pub fn elementwise_mul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape("elementwise_mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor4::from_vec(a.shape(), data)
}

/// grad_a = upstream * b, grad_b = upstream * a.
pub fn elementwise_mul_backward<T: Scalar>(
    upstream: &Tensor4<T>,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check_same_shape("elementwise_mul_backward", upstream, a)?;
    check_same_shape("elementwise_mul_backward", upstream, b)?;
    Ok((elementwise_mul(upstream, b)?, elementwise_mul(upstream, a)?))
}

pub const TENSOR_MAGIC: &[u8; 4] = b"FSNT";

/// Serialize as: magic "FSNT", precision byte (element width), four u32
/// little-endian dims (n, c, h, w), then the raw little-endian values.
pub fn write_tensor<T: Scalar, W: Write>(t: &Tensor4<T>, w: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(21 + t.len() * T::PRECISION.byte() as usize);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(T::PRECISION.byte());
    for d in t.shape().dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds u32 range")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor4<T>> {
    let mut header = [0u8; 21];
    r.read_exact(&mut header)?;
    if &header[0..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".to_string()));
    }
    let precision = Precision::from_byte(header[4])?;
    if precision != T::PRECISION {
        return Err(Error::Format(format!(
            "precision mismatch: file has {:?}, reader expects {:?}",
            precision,
            T::PRECISION
        )));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 5 + 4 * i;
        *d = u32::from_le_bytes([header[o], header[o + 1], header[o + 2], header[o + 3]]) as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let width = T::PRECISION.byte() as usize;
    let mut raw = vec![0u8; shape.len() * width];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor4::from_vec(shape, data)
}
