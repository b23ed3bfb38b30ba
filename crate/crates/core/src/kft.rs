//! The `KFT1` binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..4   magic "KFT1"
//! byte  4      dtype: 0 = f32, 1 = f64
//! byte  5      rank r in {1, 2, 3}
//! next r*4     u32 extents
//! rest         row-major payload
//! ```
//!
//! Round-trips are bit-exact. Loading an f32 file into an f64 tensor is a
//! lossless widening and allowed; the narrowing direction is rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{DenseTensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"KFT1";

pub fn write_tensor<S: Scalar, W: Write>(out: &mut W, tensor: &DenseTensor<S>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[S::DTYPE.code(), tensor.rank() as u8])?;
    for &d in tensor.dims() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.numel() * S::DTYPE.size_bytes());
    for &v in tensor.data().iter() {
        v.write_le(&mut payload);
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(input: &mut R) -> Result<DenseTensor<S>> {
    let (dims, dtype) = read_header(input)?;
    let tensor = read_payload(input, dims, dtype)?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(tensor)
}

/// Reads one tensor and leaves the reader positioned just past it.
/// Trailing bytes are the caller's business (checkpoints pack several
/// blobs back-to-back).
pub fn read_tensor_allow_trailing<S: Scalar, R: Read>(input: &mut R) -> Result<DenseTensor<S>> {
    let (dims, dtype) = read_header(input)?;
    read_payload(input, dims, dtype)
}

fn read_exact_or_truncated<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::Truncation(format!("unexpected end of data while reading {what}")))
}

fn read_header<R: Read>(input: &mut R) -> Result<(Vec<usize>, Dtype)> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut meta = [0u8; 2];
    read_exact_or_truncated(input, &mut meta, "dtype/rank")?;
    let dtype = Dtype::from_code(meta[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", meta[0])))?;
    let rank = meta[1] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 4];
        read_exact_or_truncated(input, &mut ext, "extent")?;
        let d = u32::from_le_bytes(ext) as usize;
        if d == 0 {
            return Err(Error::Format("zero extent".into()));
        }
        dims.push(d);
    }
    Ok((dims, dtype))
}

fn read_payload<S: Scalar, R: Read>(
    input: &mut R,
    dims: Vec<usize>,
    dtype: Dtype,
) -> Result<DenseTensor<S>> {
    if dtype != S::DTYPE && !(dtype == Dtype::F32 && S::DTYPE == Dtype::F64) {
        return Err(Error::Format(format!(
            "stored dtype {dtype} cannot be loaded as {} without losing precision",
            S::DTYPE
        )));
    }
    let numel: usize = dims.iter().product();
    let width = dtype.size_bytes();
    let mut payload = vec![0u8; numel * width];
    read_exact_or_truncated(input, &mut payload, "payload")?;
    let data: Vec<S> = match dtype {
        d if d == S::DTYPE => payload.chunks_exact(width).map(S::from_le).collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
    };
    DenseTensor::new(dims, data)
}

pub fn save_tensor_file<S: Scalar>(tensor: &DenseTensor<S>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_tensor(&mut out, tensor)?;
    out.flush()?;
    Ok(())
}

pub fn load_tensor_file<S: Scalar>(path: &Path) -> Result<DenseTensor<S>> {
    let mut input = BufReader::new(File::open(path)?);
    read_tensor(&mut input)
}

/// Reads just the header of a tensor file, for cheap manifest validation.
pub fn peek_dims(path: &Path) -> Result<(Vec<usize>, Dtype)> {
    let mut input = BufReader::new(File::open(path)?);
    read_header(&mut input)
}
