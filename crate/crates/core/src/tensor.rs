//! Dense rank-≤4 tensors and the `TNS1` binary container.
//!
//! Storage is row-major in (batch, channel, height, width) order. The element
//! type defaults to `f32`; `f64` tensors exist so that gradient checks can run
//! the whole forward pass in widened precision.

use std::fmt::Debug;
use std::io::{Read, Write};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = a·b (+ c if accumulate)` for `m×k` by `k×n` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path) => {
        impl Scalar for $ty {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= gemm_extent(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= gemm_extent(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: extents checked above; all strides are non-negative.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense tensor with at most four extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        validate_shape(shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Extents as (batch, channel, height, width); errors unless rank 4.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(
                op,
                format!("expected a rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Extents as (height, width); errors unless rank 2.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::invalid(
                op,
                format!("expected a rank-2 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Largest element; `-inf` for an empty tensor.
    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Contiguous slice of the sub-tensor at `index` along the leading axis.
    pub fn outer(&self, index: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[index * stride..(index + 1) * stride]
    }

    pub fn outer_mut(&mut self, index: usize) -> &mut [T] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[index * stride..(index + 1) * stride]
    }

    /// Copies the sub-tensor at `index` along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Tensor<T> {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.outer(index).to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        if first.rank() >= 4 {
            return Err(Error::invalid("stack", "stacked tensor would exceed rank 4"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::invalid(
            "tensor",
            format!("rank must be 1..=4, got shape {shape:?}"),
        ));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(
            "tensor",
            format!("extents must be positive, got shape {shape:?}"),
        ));
    }
    Ok(())
}

pub const TNS_MAGIC: &[u8; 4] = b"TNS1";

/// Writes a tensor in the `TNS1` layout: magic, u8 rank, u32 LE extents, f32 LE payload.
pub fn write_tns<W: Write>(writer: &mut W, tensor: &Tensor<f32>) -> std::io::Result<()> {
    writer.write_all(TNS_MAGIC)?;
    writer.write_all(&[tensor.rank() as u8])?;
    for &extent in tensor.shape() {
        writer.write_all(&(extent as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&payload)
}

pub fn read_tns<R: Read>(reader: &mut R) -> Result<Tensor<f32>> {
    let bad = |detail: String| Error::format("TNS1 tensor", detail);
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|e| bad(format!("header: {e}")))?;
    if &magic != TNS_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    reader
        .read_exact(&mut rank)
        .map_err(|e| bad(format!("rank: {e}")))?;
    let rank = rank[0] as usize;
    if rank == 0 || rank > 4 {
        return Err(bad(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 4];
        reader
            .read_exact(&mut buf)
            .map_err(|e| bad(format!("extents: {e}")))?;
        shape.push(u32::from_le_bytes(buf) as usize);
    }
    if shape.contains(&0) {
        return Err(bad(format!("zero extent in {shape:?}")));
    }
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    reader
        .read_exact(&mut payload)
        .map_err(|e| bad(format!("payload of {len} values: {e}")))?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn tns_bytes(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * tensor.rank() + 4 * tensor.len());
    write_tns(&mut out, tensor).expect("writing to a Vec cannot fail");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn tns_round_trip_is_bit_exact() {
        let t = Tensor::new(&[2, 1, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30])
            .unwrap();
        let bytes = tns_bytes(&t);
        assert_eq!(&bytes[..4], b"TNS1");
        assert_eq!(bytes[4], 3);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 5 + 12 + 24);
        let back = read_tns(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tns_rejects_truncated_payload() {
        let t = Tensor::<f32>::ones(&[4]);
        let bytes = tns_bytes(&t);
        let err = read_tns(&mut &bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("payload"));
        assert!(read_tns(&mut &b"TNS2\x01\x01\0\0\0"[..]).is_err());
    }

    #[test]
    fn gemm_respects_transposed_strides() {
        // a = [[1,2],[3,4]] read transposed -> [[1,3],[2,4]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, false);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
        f64::gemm(2, 2, 2, &a, (2, 1), &b, (2, 1), &mut c, true);
        assert_eq!(c, [2.0, 5.0, 5.0, 8.0]);
    }
}
