//! Flat binary checkpoints of network parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "NEGOCKPT"
//! version  u32       1
//! digest   32 bytes  SHA-256 of the NetworkSpec JSON
//! count    u32       number of tensors that follow
//! tensor*  rank: u32, dims: rank x u64, values: prod(dims) x f64
//! ```
//!
//! Tensors are written per trainable parameter in layer order (weight, then
//! bias), each parameter contributing its value followed by its momentum
//! buffer. Values are always stored as f64 regardless of the scalar type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::network::Network;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NEGOCKPT";
pub const VERSION: u32 = 1;

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| ckpt_err(format!("unexpected end of data: {e}")))?;
    Ok(buf)
}

fn read_tensor<T: Scalar>(r: &mut impl Read, expected: &[usize]) -> Result<Tensor<T>> {
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    if rank != expected.len() {
        return Err(ckpt_err(format!(
            "tensor rank {rank} does not match expected shape {expected:?}"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r)?) as usize);
    }
    if shape != expected {
        return Err(ckpt_err(format!(
            "tensor shape {shape:?} does not match expected {expected:?}"
        )));
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(T::lit(f64::from_le_bytes(read_array(r)?)));
    }
    Tensor::new(&shape, data)
}

impl<T: Scalar> Network<T> {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| ckpt_err(format!("write failed: {e}"));
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.spec().digest()).map_err(io)?;
        let count = 2 * self.params().count();
        w.write_all(&(count as u32).to_le_bytes()).map_err(io)?;
        for (_, _, p) in self.params() {
            write_tensor(w, p.value()).map_err(io)?;
            write_tensor(w, p.velocity()).map_err(io)?;
        }
        Ok(())
    }

    /// Rebuilds a network for `spec` from checkpoint bytes. The stored digest
    /// and every tensor shape must match `spec`.
    pub fn read_checkpoint(spec: &NetworkSpec, r: &mut impl Read) -> Result<Self> {
        if &read_array::<8>(r)? != MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        if read_array::<32>(r)? != spec.digest() {
            return Err(ckpt_err("network spec digest mismatch"));
        }
        let mut net = Network::build(spec, 0)?;
        let count = u32::from_le_bytes(read_array(r)?) as usize;
        if count != 2 * net.params().count() {
            return Err(ckpt_err(format!(
                "checkpoint holds {count} tensors, network needs {}",
                2 * net.params().count()
            )));
        }
        for (_, _, p) in net.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = read_tensor(r, &shape)?;
            p.velocity = read_tensor(r, &shape)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| ckpt_err(e.to_string()))? != 0 {
            return Err(ckpt_err("trailing bytes after last tensor"));
        }
        Ok(net)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(spec: &NetworkSpec, path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(spec, &mut BufReader::new(file))
    }
}
