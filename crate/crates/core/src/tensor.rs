//! Dense row-major tensors and the `SURTTENS` container format.
//!
//! The container layout is: the 8 magic bytes `SURTTENS`, an entry count
//! (u32 LE), then per entry the name length (u32) and UTF-8 name bytes, the
//! rank (u32), each dimension (u32), and the payload as little-endian `f32`
//! values in row-major order.

use std::io::Read;
use std::path::Path;

use crate::error::{Result, SurtError};
use crate::fsutil::write_atomic;

pub const CONTAINER_MAGIC: &[u8; 8] = b"SURTTENS";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(SurtError::Tensor(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SurtError::Tensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Build a `rows × cols` matrix. Panics if the data length is wrong.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of the tensor viewed as a matrix (all leading dims flattened).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(SurtError::Tensor(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor::matrix(end - start, c, self.data[start * c..end * c].to_vec())
    }

    /// Stack matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map(|t| t.cols()).unwrap_or(0);
        if parts.iter().any(|t| t.cols() != cols) {
            return Err(SurtError::Tensor("vstack column mismatch".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let rows = data.len() / cols.max(1);
        Tensor::new(vec![rows, cols], data)
    }
}

/// `out[m×n] (+)= a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_nt_into(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn matmul_tn_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Named tensors in insertion order, as stored in a container file.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode_container(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode_container(mut bytes: &[u8]) -> Result<NamedTensors> {
    let bad = |e: std::io::Error| SurtError::Tensor(format!("truncated container: {e}"));
    let mut magic = [0u8; 8];
    bytes.read_exact(&mut magic).map_err(bad)?;
    if &magic != CONTAINER_MAGIC {
        return Err(SurtError::Tensor("bad container magic".into()));
    }
    let count = read_u32(&mut bytes).map_err(bad)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut bytes).map_err(bad)? as usize;
        let mut name = vec![0u8; name_len];
        bytes.read_exact(&mut name).map_err(bad)?;
        let name = String::from_utf8(name)
            .map_err(|_| SurtError::Tensor("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut bytes).map_err(bad)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut bytes).map_err(bad)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 4];
            bytes.read_exact(&mut b).map_err(bad)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if !bytes.is_empty() {
        return Err(SurtError::Tensor("trailing bytes after container".into()));
    }
    Ok(out)
}

pub fn write_container(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode_container(entries))
}

pub fn read_container(path: &Path) -> Result<NamedTensors> {
    let mut f = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SurtError::MissingFile(path.to_path_buf())
        } else {
            SurtError::io(path, e)
        }
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| SurtError::io(path, e))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn container_header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_container(&[("ab".to_string(), t)]);
        assert_eq!(&bytes[..8], b"SURTTENS");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..18], b"ab");
        assert_eq!(&bytes[18..22], &1u32.to_le_bytes());
        assert_eq!(&bytes[22..26], &2u32.to_le_bytes());
        assert_eq!(&bytes[26..30], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[30..34], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 34);
    }

    #[test]
    fn truncated_container_is_an_error() {
        let t = Tensor::zeros(&[3, 2]);
        let bytes = encode_container(&[("x".to_string(), t)]);
        assert!(decode_container(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_container(b"NOTMAGIC\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn container_roundtrip_is_f32_exact(
            rows in 1usize..5, cols in 1usize..5,
            seed in proptest::collection::vec(-1e3f32..1e3, 25)
        ) {
            let data: Vec<f64> = seed.iter().take(rows * cols).map(|&v| v as f64).collect();
            let t = Tensor::matrix(rows, cols, data);
            let entries = vec![("w".to_string(), t.clone()), ("b".to_string(), Tensor::scalar(0.5))];
            let back = decode_container(&encode_container(&entries)).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
