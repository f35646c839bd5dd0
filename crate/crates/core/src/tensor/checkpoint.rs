//! Named-tensor checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"GFCK"
//! version u32
//! count   u32
//! count × {
//!     name_len u32, name bytes (UTF-8)
//!     rank     u32
//!     rank × extent u64
//!     payload  product(extents) × f64
//! }
//! ```
//!
//! Entries are written in name order so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type Checkpoint = BTreeMap<String, Tensor>;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(
        &u32::try_from(tensors.len())
            .map_err(|_| fmt("too many tensors"))?
            .to_le_bytes(),
    )?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(
            &u32::try_from(bytes.len())
                .map_err(|_| fmt("name too long"))?
                .to_le_bytes(),
        )?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Checkpoint::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| fmt("extent overflow"))?);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if out
            .insert(name.clone(), Tensor::new(shape, data)?)
            .is_some()
        {
            return Err(fmt(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let mut ck = Checkpoint::new();
        ck.insert("a".into(), Tensor::new(vec![2], vec![1.0, -0.5]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        assert_eq!(&buf[..4], b"GFCK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'a');
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(&buf[21..29], &2u64.to_le_bytes());
        assert_eq!(&buf[29..37], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 45);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            read_checkpoint(&b"NOPE\x01\0\0\0\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let mut ck = Checkpoint::new();
        ck.insert("w".into(), Tensor::zeros(&[3, 3]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn byte_exact_round_trip(seed in any::<u64>(), count in 0usize..5) {
            let mut rng = Rng::new(seed);
            let mut ck = Checkpoint::new();
            for i in 0..count {
                let rows = 1 + rng.below(4);
                let cols = 1 + rng.below(4);
                ck.insert(format!("layers.{i}.w"), Tensor::randn(&[rows, cols], 3.0, &mut rng));
            }
            let mut a = Vec::new();
            write_checkpoint(&mut a, &ck).unwrap();
            let back = read_checkpoint(&a[..]).unwrap();
            prop_assert_eq!(&back, &ck);
            let mut b = Vec::new();
            write_checkpoint(&mut b, &back).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
