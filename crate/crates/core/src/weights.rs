//! The `RNWT` flat binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "RNWT"
//! version u32      currently 1
//! count   u32      number of tensor records
//! record: name_len u16, name (UTF-8), rank u8, extents (u32 each),
//!         payload (f64 little-endian, row-major)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RNWT";
pub const VERSION: u32 = 1;

/// Write named tensors in the container format. Entries are written in the
/// map's (sorted) order, so the byte stream is deterministic.
pub fn write_container<W: Write>(out: &mut W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::WeightFormat("too many tensors".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::WeightFormat(format!("tensor name too long: {name}")))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name_bytes)?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::WeightFormat(format!("rank too large for {name}")))?;
        out.write_all(&[rank])?;
        for &e in t.shape() {
            let e = u32::try_from(e)
                .map_err(|_| Error::WeightFormat(format!("extent too large in {name}")))?;
            out.write_all(&e.to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(input: &mut R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::WeightFormat(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    input.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf);

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        input.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::WeightFormat(format!("tensor name is not UTF-8: {e}")))?;
        let mut rank_buf = [0u8; 1];
        input.read_exact(&mut rank_buf)?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut f64buf = [0u8; 8];
        for v in &mut data {
            input.read_exact(&mut f64buf)?;
            *v = f64::from_le_bytes(f64buf);
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::WeightFormat(format!("record {name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::WeightFormat(format!("duplicate tensor name {name}")));
        }
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(&mut file, tensors)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_container(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("a.w".to_string(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5));
        m.insert("b.bias".to_string(), Tensor::new(vec![1], vec![-1.25]).unwrap());
        m
    }

    #[test]
    fn round_trip() {
        let m = sample();
        let mut buf = Vec::new();
        write_container(&mut buf, &m).unwrap();
        let back = read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn header_bytes_are_pinned() {
        let m = sample();
        let mut buf = Vec::new();
        write_container(&mut buf, &m).unwrap();
        assert_eq!(&buf[0..4], b"RNWT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        // first record: name "a.w" (sorted order), rank 2, extents 2 and 3
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 3);
        assert_eq!(&buf[14..17], b"a.w");
        assert_eq!(buf[17], 2);
        assert_eq!(u32::from_le_bytes(buf[18..22].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[22..26].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(buf[26..34].try_into().unwrap()), 0.0);
        assert_eq!(f64::from_le_bytes(buf[34..42].try_into().unwrap()), 0.5);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut buf = Vec::new();
        write_container(&mut buf, &sample()).unwrap();
        buf[0] = b'X';
        assert!(read_container(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_container(&mut buf, &sample()).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_container(&mut buf.as_slice()).is_err());
    }
}
