//! `PCRT` tensor files: magic, one rank byte, `rank` little-endian u32 extents,
//! then the values as little-endian f64 in row-major order.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCRT";

pub fn write_tensor<T: Real, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank above 255"))?;
    let mut buf = Vec::with_capacity(5 + 4 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent above u32")
        })?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.f64().to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor<T: Real, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format {
            offset: 0,
            message: e.to_string(),
        })?;
    parse(&bytes)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    if bytes.len() < *at + n {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated: needed {n} bytes at offset {at}"),
        });
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

fn parse<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected PCRT".into(),
        });
    }
    let rank = take(bytes, &mut at, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let off = at;
        let d = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: off,
                message: "zero extent".into(),
            });
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = f64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
        data.push(T::of(v));
    }
    if at != bytes.len() {
        return Err(Error::Format {
            offset: at,
            message: "trailing bytes".into(),
        });
    }
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f64>::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PCRT");
        assert_eq!(buf[4], 2);
        assert_eq!(&buf[5..9], &2u32.to_le_bytes());
        assert_eq!(&buf[9..13], &1u32.to_le_bytes());
        assert_eq!(&buf[13..21], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 13 + 16);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::<f64>::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match read_tensor::<f64, _>(&buf[..]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, buf.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f64 / 7.0 - 50.0).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&t, &mut buf).unwrap();
            let back: Tensor<f64> = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
