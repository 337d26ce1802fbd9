//! Binary tensor file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "STAT"
//! version u32      1
//! ndims   u32
//! dims    ndims * u64
//! dtype   u32      1 = 32-bit float, little-endian
//! payload product(dims) * 4 bytes, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attn::HeadTensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"STAT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

/// A raw tensor as stored on disk: dims plus a flat row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let expect: u64 = dims.iter().product();
        if expect != data.len() as u64 {
            return Err(Error::TensorFormat(format!(
                "dims {:?} imply {} elements, payload has {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(TensorFile { dims, data })
    }

    /// Views a 2D tensor as one head matrix.
    pub fn as_head_tensor(&self) -> Result<HeadTensor<f32>> {
        if self.dims.len() != 2 {
            return Err(Error::TensorFormat(format!(
                "expected 2 dims, got {:?}",
                self.dims
            )));
        }
        HeadTensor::from_vec(self.dims[0] as usize, self.dims[1] as usize, self.data.clone())
    }

    /// Views a 2D tensor as one head, or a 3D `(heads, rows, cols)` tensor
    /// as a stack of head matrices.
    pub fn as_head_stack(&self) -> Result<Vec<HeadTensor<f32>>> {
        match self.dims.len() {
            2 => Ok(vec![self.as_head_tensor()?]),
            3 => {
                let (heads, rows, cols) = (
                    self.dims[0] as usize,
                    self.dims[1] as usize,
                    self.dims[2] as usize,
                );
                let per = rows * cols;
                (0..heads)
                    .map(|h| {
                        HeadTensor::from_vec(
                            rows,
                            cols,
                            self.data[h * per..(h + 1) * per].to_vec(),
                        )
                    })
                    .collect()
            }
            other => Err(Error::TensorFormat(format!(
                "expected 2 or 3 dims, got {other}"
            ))),
        }
    }

    /// Packs a stack of equally-shaped head matrices as `(heads, rows, cols)`.
    pub fn from_head_stack(heads: &[HeadTensor<f32>]) -> Result<Self> {
        let first = heads.first().ok_or_else(|| {
            Error::TensorFormat("cannot pack an empty head stack".to_string())
        })?;
        let mut data = Vec::with_capacity(heads.len() * first.data().len());
        for h in heads {
            first.check_same_shape(h, "head stack")?;
            data.extend_from_slice(h.data());
        }
        TensorFile::new(
            vec![heads.len() as u64, first.rows() as u64, first.cols() as u64],
            data,
        )
    }
}

pub fn write_tensor<W: Write>(out: &mut W, tensor: &TensorFile) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensor.dims.len() as u32).to_le_bytes())?;
    for d in &tensor.dims {
        out.write_all(&d.to_le_bytes())?;
    }
    out.write_all(&DTYPE_F32.to_le_bytes())?;
    for v in &tensor.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<TensorFile> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::TensorFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::TensorFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let ndims = read_u32(input)? as usize;
    if ndims == 0 || ndims > 8 {
        return Err(Error::TensorFormat(format!("implausible ndims {ndims}")));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        dims.push(u64::from_le_bytes(buf));
    }
    let dtype = read_u32(input)?;
    if dtype != DTYPE_F32 {
        return Err(Error::TensorFormat(format!(
            "unsupported dtype code {dtype}, expected {DTYPE_F32}"
        )));
    }
    let count: u64 = dims.iter().product();
    let mut payload = vec![0u8; (count * 4) as usize];
    input.read_exact(&mut payload)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    TensorFile::new(dims, data)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_tensor_file<P: AsRef<Path>>(path: P, tensor: &TensorFile) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_tensor(&mut out, tensor)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensor_file<P: AsRef<Path>>(path: P) -> Result<TensorFile> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}
