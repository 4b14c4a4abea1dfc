//! T4F: the on-disk tensor format shared by every module.
//!
//! Layout: 8-byte magic `T4F\0v001`, four little-endian u32 dims
//! (H, W, C, N), then `H*W*C*N` little-endian f32 values in the tensor
//! memory layout (batch outermost, then channel, then row, then column).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: [u8; 8] = *b"T4F\0v001";

const HEADER_LEN: u64 = 24;

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor4, path: &Path) -> Result<()> {
    let mut header = Vec::with_capacity(HEADER_LEN as usize);
    header.extend_from_slice(&MAGIC);
    for dim in [t.h(), t.w(), t.c(), t.n()] {
        header.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor<R: Read>(input: &mut R, path: &Path) -> Result<Tensor4> {
    let mut magic = [0u8; 8];
    read_exact_at(input, &mut magic, 0, path)?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {:02x?}, expected {:02x?}", magic, MAGIC),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        read_exact_at(input, &mut b, 8 + 4 * i as u64, path)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [h, w, c, n] = dims;
    if h == 0 || w == 0 || c == 0 || n == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            msg: format!("zero dimension in {}x{}x{}x{}", h, w, c, n),
        });
    }
    let count = h * w * c * n;
    let mut raw = vec![0u8; count * 4];
    read_exact_at(input, &mut raw, HEADER_LEN, path)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor4::from_vec(h, w, c, n, data)
}

fn read_exact_at<R: Read>(input: &mut R, buf: &mut [u8], offset: u64, path: &Path) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: offset + filled as u64,
                    msg: format!("truncated: wanted {} more bytes", buf.len() - filled),
                })
            }
            Ok(k) => filled += k,
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_tensor(&mut out, t, path)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file), path)
}
