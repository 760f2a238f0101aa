//! The IDX binary format (MNIST family): big-endian magic `0x0000_08NN`
//! where `NN` is the number of dimensions, then one big-endian `u32` extent
//! per dimension, then unsigned bytes.

use crate::error::{ArosError, Result};
use crate::tensor::Tensor;

const MAGIC_LABELS: u32 = 0x0000_0801;
const MAGIC_IMAGES: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxPayload {
    /// `(n, H, W)` scaled to `[0, 1]`.
    Images(Tensor),
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(ArosError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxPayload> {
    let magic = read_u32(bytes, 0)?;
    let ndims = match magic {
        MAGIC_LABELS => 1,
        MAGIC_IMAGES => 3,
        observed => return Err(ArosError::BadMagic { observed }),
    };
    let dims = (0..ndims)
        .map(|k| read_u32(bytes, 4 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let count: usize = dims.iter().product();
    let expected = header + count;
    if bytes.len() != expected {
        return Err(ArosError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header..];
    Ok(match magic {
        MAGIC_LABELS => IdxPayload::Labels(payload.to_vec()),
        _ => IdxPayload::Images(Tensor::new(dims, payload.iter().map(|&b| b as f64 / 255.0).collect())?),
    })
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Inverse of the image branch of [`parse_idx`]; values are rounded to the
/// nearest multiple of 1/255.
pub fn write_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, h, w] = images.shape() else {
        return Err(ArosError::Shape {
            op: "write_idx_images",
            lhs: images.shape().to_vec(),
            rhs: vec![],
        });
    };
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
    for d in [n, h, w] {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(ArosError::contract(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn labels_example() {
        let got = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 9]).unwrap();
        assert_eq!(got, IdxPayload::Labels(vec![7, 2, 9]));
    }

    #[test]
    fn image_example() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64];
        let IdxPayload::Images(t) = parse_idx(&bytes).unwrap() else {
            panic!("expected images")
        };
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!((t.data()[2] - 0.50196).abs() < 1e-5);
        assert!((t.data()[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn bad_magic_reports_observed() {
        match parse_idx(&[0, 0, 9, 9, 0, 0, 0, 0]) {
            Err(ArosError::BadMagic { observed }) => assert_eq!(observed, 0x0909),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload() {
        assert!(matches!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 2]),
            Err(ArosError::Truncated {
                expected: 11,
                found: 10
            })
        ));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(ArosError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn image_round_trip(n in 0usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..n * h * w)
                .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) as u8)
                .collect();
            let mut bytes = vec![0, 0, 8, 3];
            for d in [n, h, w] {
                bytes.extend_from_slice(&(d as u32).to_be_bytes());
            }
            bytes.extend_from_slice(&pixels);
            let IdxPayload::Images(t) = parse_idx(&bytes).unwrap() else { unreachable!() };
            prop_assert_eq!(write_idx_images(&t).unwrap(), bytes);
        }

        #[test]
        fn label_round_trip(labels in proptest::collection::vec(any::<u8>(), 0..64)) {
            let bytes = write_idx_labels(&labels);
            prop_assert_eq!(parse_idx(&bytes).unwrap(), IdxPayload::Labels(labels));
        }
    }
}
