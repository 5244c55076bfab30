//! `CMSL` checkpoint files.
//!
//! All integers and reals are little-endian:
//!
//! ```text
//! "CMSL"  version:u32  count:u32
//! count x { name_len:u32 name:bytes rank:u32 dims:u32*rank values:f64*n }   parameter values
//! count x { same layout }                                                   first moments
//! count x { same layout }                                                   second moments
//! step:u64 lr:f64 beta1:f64 beta2:f64 eps:f64 weight_decay:f64              optimizer
//! ```
//!
//! Nothing follows the optimizer block; trailing bytes are an error.

use std::path::Path;

use cms_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};
use crate::nn::{AdamW, ParamEntry, ParamStore};

pub const MAGIC: [u8; 4] = *b"CMSL";
pub const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

pub fn encode(store: &ParamStore, opt: &AdamW) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let blocks: [fn(&ParamEntry) -> &Tensor; 3] = [|e| &e.value, |e| &e.m, |e| &e.v];
    for pick in blocks {
        for (name, entry) in store.iter() {
            write_entry(&mut out, name, pick(entry));
        }
    }
    out.extend_from_slice(&opt.step.to_le_bytes());
    for v in [opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parses a complete checkpoint. Either the whole file is valid or an error
/// is returned; there is no partially filled store.
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, AdamW)> {
    let mut r = Reader::new(bytes, WHAT);
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: WHAT,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            what: WHAT,
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        values.push(read_entry(&mut r)?);
    }
    let mut moments = [Vec::new(), Vec::new()];
    for block in moments.iter_mut() {
        for (name, value) in &values {
            let offset = r.offset();
            let (n2, t) = read_entry(&mut r)?;
            if &n2 != name || t.shape() != value.shape() {
                return Err(Error::Malformed {
                    what: WHAT,
                    offset,
                    msg: format!("moment entry {n2:?} does not match parameter {name:?}"),
                });
            }
            block.push(t);
        }
    }
    let step = r.u64()?;
    let mut hyper = [0.0; 5];
    for h in hyper.iter_mut() {
        *h = r.f64()?;
    }
    r.finish()?;

    let mut store = ParamStore::new();
    let [ms, vs] = moments;
    for (((name, value), m), v) in values.into_iter().zip(ms).zip(vs) {
        if store.id(&name).is_some() {
            return Err(Error::Malformed {
                what: WHAT,
                offset: 12,
                msg: format!("duplicate parameter {name:?}"),
            });
        }
        let grad = Tensor::zeros(value.shape());
        store.insert(name, ParamEntry { value, grad, m, v });
    }
    let opt = AdamW {
        lr: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
        weight_decay: hyper[4],
        step,
    };
    Ok((store, opt))
}

fn read_entry(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let offset = r.offset();
    let len = r.u32()? as usize;
    let name = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|_| Error::Malformed {
        what: WHAT,
        offset,
        msg: "parameter name is not UTF-8".into(),
    })?;
    let rank_offset = r.offset();
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Malformed {
            what: WHAT,
            offset: rank_offset,
            msg: format!("implausible rank {rank}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Malformed {
            what: WHAT,
            offset: rank_offset,
            msg: format!("invalid dims {dims:?}"),
        })?;
    let raw = r.bytes(n.checked_mul(8).ok_or(Error::Truncated {
        what: WHAT,
        offset: r.offset(),
        needed: usize::MAX,
    })?)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((name, Tensor::new(&dims, data)?))
}

pub fn save(store: &ParamStore, opt: &AdamW, path: &Path) -> Result<()> {
    write_atomic(path, &encode(store, opt))
}

pub fn load(path: &Path) -> Result<(ParamStore, AdamW)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvLayer, ParamBuilder};

    fn sample() -> (ParamStore, AdamW) {
        let mut b = ParamBuilder::new(5);
        ConvLayer::register(&mut b, "a", 2, 3, 3, true);
        ConvLayer::register(&mut b, "b", 3, 1, 1, false);
        let mut store = b.finish();
        for (i, (_, e)) in store.iter_mut().enumerate() {
            e.m = e.value.scale(0.5 + i as f64);
            e.v = e.value.map(|x| x * x + 1e-3);
        }
        let mut opt = AdamW::new(1e-3, 1e-4);
        opt.step = 42;
        (store, opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (store, opt) = sample();
        let bytes = encode(&store, &opt);
        let (s2, o2) = decode(&bytes).unwrap();
        assert_eq!(s2, store);
        assert_eq!(o2, opt);
        assert_eq!(encode(&s2, &o2), bytes);
    }

    #[test]
    fn header_layout() {
        let (store, opt) = sample();
        let bytes = encode(&store, &opt);
        assert_eq!(&bytes[..4], b"CMSL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.kernel");
    }

    #[test]
    fn every_truncation_is_reported() {
        let (store, opt) = sample();
        let bytes = encode(&store, &opt);
        for cut in [0, 3, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Malformed { .. })));
    }

    #[test]
    fn magic_and_version_checked() {
        let (store, opt) = sample();
        let mut bytes = encode(&store, &opt);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = encode(&store, &opt);
        bytes[4] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
