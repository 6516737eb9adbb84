//! Dense N-D tensor of f64 values, row-major, plus the T4SN file format.
//!
//! Shapes follow the [T,B,C,H,W] convention (or suffixes of it); the tensor
//! itself carries no gradient. All math in the crate runs on this type.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const T4SN_MAGIC: &[u8; 4] = b"T4SN";
pub const T4SN_VERSION: u32 = 1;
pub const T4SN_DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0 || x == 1.0)
    }

    /// Flat index for a full multi-index; caller guarantees bounds.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        flat
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }
}

/// sigmoid(x) = 1/(1+e^{-x})
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// d/dx sigmoid = s(1-s), chained with the upstream gradient.
pub fn sigmoid_backward(saved_output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    saved_output.zip(upstream, "sigmoid_backward", |s, g| g * s * (1.0 - s))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(saved_input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    saved_input.zip(upstream, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Broadcast rule for `hadamard`: the smaller-rank shape is padded with
/// trailing 1s (left-aligned), then size-1 axes stretch. So a `[T]` factor
/// broadcasts against `[T,C,H,W]` the way a `[T,1,1,1]` tensor would.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let nd = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = s.to_vec();
        v.resize(nd, 1);
        v
    };
    let pa = pad(a);
    let pb = pad(b);
    let mut out = Vec::with_capacity(nd);
    for i in 0..nd {
        let (da, db) = (pa[i], pb[i]);
        if da == db || da == 1 || db == 1 {
            out.push(da.max(db));
        } else {
            return Err(Error::shape(
                "hadamard",
                format!("cannot broadcast {a:?} with {b:?}"),
            ));
        }
    }
    Ok((pa, pb, out))
}

fn broadcast_strides(padded: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for i in (0..nd).rev() {
        if padded[i] == 1 && out[i] != 1 {
            strides[i] = 0;
        } else {
            strides[i] = acc;
        }
        acc *= padded[i];
    }
    strides
}

/// Elementwise product after broadcasting.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (pa, pb, out_shape) = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(&pa, &out_shape);
    let sb = broadcast_strides(&pb, &out_shape);
    let n: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    for _ in 0..n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..nd {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        data.push(a.data[ia] * b.data[ib]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Gradients of `hadamard` w.r.t. both factors: grad_a = sum-over-stretched(up * b),
/// reduced back to `a`'s original shape (and symmetrically for b).
pub fn hadamard_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let (pa, pb, out_shape) = broadcast_shapes(a.shape(), b.shape())?;
    if upstream.shape() != out_shape.as_slice() {
        return Err(Error::shape(
            "hadamard_backward",
            format!("upstream {:?} vs broadcast {:?}", upstream.shape(), out_shape),
        ));
    }
    let sa = broadcast_strides(&pa, &out_shape);
    let sb = broadcast_strides(&pb, &out_shape);
    let nd = out_shape.len();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let mut idx = vec![0usize; nd];
    for flat in 0..upstream.len() {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..nd {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        let up = upstream.data[flat];
        ga[ia] += up * b.data[ib];
        gb[ib] += up * a.data[ia];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((
        Tensor::new(a.shape.clone(), ga)?,
        Tensor::new(b.shape.clone(), gb)?,
    ))
}

/// Explicitly tiles `a` to the broadcast shape against `b` (test aid for the
/// tiling-equivalence property).
pub fn tile_to_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    hadamard(a, &Tensor::full(b.shape(), 1.0))
}

// ---------------------------------------------------------------------------
// T4SN binary tensor file: magic "T4SN", u32 version, u8 dtype, u32 ndim,
// ndim x u32 dims, then little-endian f64 payload, row-major.
// All header integers are little-endian.
// ---------------------------------------------------------------------------

pub fn write_t4sn<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(T4SN_MAGIC)?;
    w.write_all(&T4SN_VERSION.to_le_bytes())?;
    w.write_all(&[T4SN_DTYPE_F64])?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_t4sn<R: Read>(r: &mut R, path: &str) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != T4SN_MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(b4);
    if version != T4SN_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(|e| Error::io(path, e))?;
    if b1[0] != T4SN_DTYPE_F64 {
        return Err(Error::format(path, 8, format!("unsupported dtype {}", b1[0])));
    }
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let ndim = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let d = u32::from_le_bytes(b4) as usize;
        if d == 0 {
            return Err(Error::format(path, 13 + 4 * i as u64, "zero dimension"));
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b8 = [0u8; 8];
    for i in 0..n {
        r.read_exact(&mut b8).map_err(|_| {
            Error::format(
                path,
                13 + 4 * ndim as u64 + 8 * i as u64,
                "truncated payload",
            )
        })?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}

pub fn save_t4sn(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let p = path.as_ref();
    let mut f = std::fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?;
    let mut buf = std::io::BufWriter::new(&mut f);
    write_t4sn(&mut buf, t).map_err(|e| Error::io(p.display().to_string(), e))
}

pub fn load_t4sn(path: impl AsRef<Path>) -> Result<Tensor> {
    let p = path.as_ref();
    let f = std::fs::File::open(p).map_err(|e| Error::io(p.display().to_string(), e))?;
    let mut buf = std::io::BufReader::new(f);
    read_t4sn(&mut buf, &p.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn sigmoid_values() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        let s = sigmoid(&x);
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 0.731059).abs() < 1e-6);
        assert!((s.data()[2] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let x = Tensor::scalar(0.0);
        let s = sigmoid(&x);
        let g = sigmoid_backward(&s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.data()[0], 0.25);
    }

    #[test]
    fn hadamard_broadcast_t_axis() {
        // [2] against [2,2]: per-row scaling
        let a = Tensor::new(vec![1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let h = hadamard(&a, &b).unwrap();
        assert_eq!(h.data(), &[2.0, 6.0, 10.0, 14.0]);
    }

    #[test]
    fn hadamard_vector_against_cube() {
        let a = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2, 1, 2, 2], vec![1.0; 8]).unwrap();
        let h = hadamard(&a, &b).unwrap();
        assert_eq!(h.shape(), &[2, 1, 2, 2]);
        assert_eq!(h.data(), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn hadamard_incompatible() {
        let a = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        assert!(hadamard(&a, &b).is_err());
    }

    #[test]
    fn hadamard_backward_reduces_broadcast_axes() {
        let a = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let (ga, gb) = hadamard_backward(&a, &b, &up).unwrap();
        assert_eq!(ga.data(), &[3.0, 7.0]); // sums of b rows
        assert_eq!(gb.data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn t4sn_round_trip_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, f64::MIN_POSITIVE, 7.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_t4sn(&mut buf, &t).unwrap();
        let back = read_t4sn(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(t, back);
        // bit-exactness, not just value equality
        let mut buf2 = Vec::new();
        write_t4sn(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn t4sn_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            read_t4sn(&mut buf.as_slice(), "mem"),
            Err(Error::Format { .. })
        ));
    }
}
