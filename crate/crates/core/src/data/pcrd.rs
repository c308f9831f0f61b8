//! `PCRD` dataset files: magic, little-endian u32 `N, K, H, W`, `N` label
//! bytes, then `N·H·W` pixel bytes row-major. Pixels are quantized to 8 bits.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PCRD";

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let classes = u8::try_from(d.classes())
        .map_err(|_| Error::Input(format!("{} classes do not fit a label byte", d.classes())))?;
    let mut out = Vec::with_capacity(20 + d.len() * (1 + d.height() * d.width()));
    out.extend_from_slice(MAGIC);
    for v in [d.len(), classes as usize, d.height(), d.width()] {
        let v = u32::try_from(v).map_err(|_| Error::Input(format!("header value {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(d.labels().iter().map(|&y| y as u8));
    out.extend(d.images().data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn format_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn decode_dataset(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(format_error(bytes.len(), "truncated before magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_error(0, "bad magic, expected PCRD"));
    }
    if bytes.len() < 20 {
        return Err(format_error(bytes.len(), "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, k, h, w) = (word(0), word(1), word(2), word(3));
    if n == 0 {
        return Err(format_error(4, "dataset holds no samples"));
    }
    if k < 2 {
        return Err(format_error(8, format!("class count {k} below 2")));
    }
    if h == 0 || w == 0 {
        return Err(format_error(12, format!("image extents {h}x{w} must be positive")));
    }
    let labels_at = 20;
    let pixels_at = labels_at + n;
    let need = pixels_at + n * h * w;
    if bytes.len() < need {
        return Err(format_error(
            bytes.len(),
            format!("truncated: {need} bytes expected, {} present", bytes.len()),
        ));
    }
    if bytes.len() > need {
        return Err(format_error(need, "trailing bytes after pixel data"));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &y) in bytes[labels_at..pixels_at].iter().enumerate() {
        if y as usize >= k {
            return Err(format_error(labels_at + i, format!("label {y} not below class count {k}")));
        }
        labels.push(y as usize);
    }
    let data = bytes[pixels_at..].iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(&[n, 1, h, w], data)?;
    Dataset::new(images, labels, k, split)
}

pub fn save_binary_dataset(d: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(d)?).map_err(|e| Error::io(path, e))
}

pub fn load_binary_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn sample() -> Dataset {
        let spec = SyntheticSpec {
            train_counts: vec![3; 4],
            val_counts: vec![1; 4],
            test_counts: vec![1; 4],
            ..SyntheticSpec::balanced(7)
        };
        generate_synthetic(&spec).unwrap().train
    }

    #[test]
    fn round_trip_within_quantization() {
        let d = sample();
        let back = decode_dataset(&encode_dataset(&d).unwrap(), Split::Train).unwrap();
        assert_eq!(back.labels(), d.labels());
        assert_eq!(back.images().shape(), d.images().shape());
        assert!(back.images().max_abs_diff(d.images()) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode_dataset(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match decode_dataset(cut, Split::Train) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_labels() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[20] = 9;
        assert!(matches!(
            decode_dataset(&bytes, Split::Train),
            Err(Error::Format { offset: 20, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_dataset(&bytes, Split::Train),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut bytes = b"PCRD".to_vec();
        for v in [0u32, 4, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_dataset(&bytes, Split::Test), Err(Error::Format { .. })));
    }
}
