//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MODECKPT"
//! version    u32
//! config     u64 length + UTF-8 JSON
//! hash       32 bytes SHA-256 of the config JSON
//! rng        32-byte ChaCha seed, u64 stream, u128 word position
//! count      u64
//! entry*     u64 name length + name, u8 dtype tag, u8 trainable,
//!            u32 rank, u64 extents, raw little-endian values
//! ```
//!
//! Round trips are bit-exact.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::{DType, Float, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MODECKPT";
const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

impl Default for RngState {
    fn default() -> Self {
        Self::capture(&ChaCha8Rng::seed_from_u64(0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub config_json: String,
    pub config_hash: [u8; 32],
    pub rng: RngState,
}

impl Header {
    pub fn new(config_json: impl Into<String>, rng: RngState) -> Self {
        let config_json = config_json.into();
        let config_hash = Sha256::digest(config_json.as_bytes()).into();
        Self { config_json, config_hash, rng }
    }

    pub fn config_hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }
}

pub fn encode<T: Float>(header: &Header, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header.config_json.as_bytes());
    out.extend_from_slice(&header.config_hash);
    out.extend_from_slice(&header.rng.seed);
    out.extend_from_slice(&header.rng.stream.to_le_bytes());
    out.extend_from_slice(&header.rng.word_pos.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(u8::from(t.trainable()));
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<(Header, ParamStore<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_json = r.string()?;
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    if Sha256::digest(config_json.as_bytes()).as_slice() != config_hash {
        return Err(Error::Checkpoint("config hash does not match config".into()));
    }
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let header = Header { config_json, config_hash, rng: RngState { seed, stream, word_pos } };

    let count = r.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "`{name}` stored as {dtype:?}, requested {:?}",
                T::DTYPE
            )));
        }
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let size = dtype.size_of();
        let raw = r.take(n.checked_mul(size).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?
            .with_trainable(trainable);
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, params))
}

pub fn save<T: Float>(path: &Path, header: &Header, params: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode(header, params))?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<(Header, ParamStore<T>)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e38]).unwrap());
        s.insert("b.bias", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap().with_trainable(true));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let header = Header::new(r#"{"d":8}"#, RngState::capture(&rng));
        let params = sample();
        let bytes = encode(&header, &params);
        let (h2, p2) = decode::<f32>(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(encode(&h2, &p2), bytes);
        assert!(p2.by_name("b.bias").unwrap().trainable());
        assert!(!p2.by_name("a").unwrap().trainable());
        assert_eq!(p2.digest(), params.digest());

        let mut resumed = h2.rng.restore();
        assert_eq!(resumed.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn dtype_and_corruption_are_rejected() {
        let header = Header::new("{}", RngState::default());
        let bytes = encode(&header, &sample());
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(decode::<f32>(&bad).is_err());
        assert!(decode::<f32>(b"NOTACKPT").is_err());
    }
}
