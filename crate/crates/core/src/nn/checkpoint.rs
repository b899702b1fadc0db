//! Binary checkpoint format.
//!
//! Layout: magic `VSCK`, format version (`u32` LE), mode byte, the
//! JSON-serialized spec (length-prefixed), the parameter count, then per
//! parameter its name, dimensions and values as little-endian `f32`,
//! and finally a SHA-256 checksum of everything before it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Array;

use super::params::ParameterSet;
use super::NetworkSpec;

const MAGIC: &[u8; 4] = b"VSCK";
const VERSION: u32 = 1;

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    fn write_all(&mut self, buf: &[u8]) -> Result<()> {
        self.hasher.update(buf);
        self.inner.write_all(buf)?;
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = HashingWriter { inner: BufWriter::new(file), hasher: Sha256::new() };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[params.is_train() as u8])?;

    let spec_json = serde_json::to_vec(spec)
        .map_err(|e| Error::Checkpoint(format!("spec serialization: {e}")))?;
    w.write_all(&(spec_json.len() as u64).to_le_bytes())?;
    w.write_all(&spec_json)?;

    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, array) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(array.shape().len() as u32).to_le_bytes())?;
        for &d in array.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(array.numel() * 4);
        for v in array.values() {
            buf.extend_from_slice(&(v.as64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }

    let digest = w.hasher.finalize();
    w.inner.write_all(&digest)?;
    w.inner.flush()?;
    Ok(())
}

struct HashingReader<R: Read> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> HashingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        self.hasher.update(&*buf);
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(NetworkSpec, ParameterSet<T>)> {
    let file = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = HashingReader { inner: BufReader::new(file), hasher: Sha256::new() };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut mode = [0u8; 1];
    r.read_exact(&mut mode)?;

    let spec_len = r.read_u64()? as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    r.read_exact(&mut spec_bytes)?;
    let spec: NetworkSpec = serde_json::from_slice(&spec_bytes)
        .map_err(|e| Error::Checkpoint(format!("spec deserialization: {e}")))?;
    let expected_shapes = spec.param_shapes()?;

    let count = r.read_u32()? as usize;
    let mut params = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u32()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = r.read_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf)?;
        let values: Vec<T> = buf
            .chunks_exact(4)
            .map(|c| T::of64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if let Some(expect) = expected_shapes.get(&name) {
            if expect != &shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {shape:?}, spec wants {expect:?}"
                )));
            }
        }
        params.insert(name, Array::from_vec(&shape, values)?);
    }

    for name in expected_shapes.keys() {
        if !params.contains_key(name) {
            return Err(Error::Checkpoint(format!("parameter `{name}` missing")));
        }
    }

    let expected_digest = r.hasher.clone().finalize();
    let mut digest = [0u8; 32];
    r.inner
        .read_exact(&mut digest)
        .map_err(|e| Error::Checkpoint(format!("missing checksum: {e}")))?;
    if digest[..] != expected_digest[..] {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checksum".into()));
    }

    Ok((spec, ParameterSet::from_map(params, mode[0] != 0)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{forward_eval, SpecBuilder};

    fn spec() -> NetworkSpec {
        let (mut b, x) = SpecBuilder::new(vec![1, 4, 4, 2]);
        let c = b.conv3x3(x, "stem", 2, [1, 1, 1]);
        let n = b.batch_norm(c, "bn", false);
        let r = b.relu(n);
        let p = b.global_avg_pool(r);
        let o = b.linear(p, "fc", 2);
        b.finish(o)
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32() {
        let spec = spec();
        let mut params =
            ParameterSet::<f32>::init(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        params.set_train(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &spec, &params).unwrap();
        let (spec2, params2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(params2, params);

        // Forward output after the round trip is bit-identical.
        let input = crate::tensor::Array::<f32>::filled(&[1, 1, 4, 4, 2], 0.25);
        let a = forward_eval(&spec, &params, &input).unwrap();
        let b = forward_eval(&spec2, &params2, &input).unwrap();
        let (av, bv) = (a.output().values(), b.output().values());
        assert!(av.iter().zip(bv).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let spec = spec();
        let params =
            ParameterSet::<f32>::init(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &spec, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
