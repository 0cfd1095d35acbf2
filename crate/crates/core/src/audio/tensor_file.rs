//! Binary spectrogram files: `"FSSR"`, then `version`, `bins`, `frames` as
//! little-endian `u32`, then `bins * frames` row-major little-endian `f32`.

use std::io::{Read, Write};

use ndarray::Array2;

use super::spectrogram::{looks_normalized, Spectrogram};
use crate::error::{Error, Result};

pub const TENSOR_FILE_MAGIC: &[u8; 4] = b"FSSR";
pub const TENSOR_FILE_VERSION: u32 = 1;

pub fn write_spectrogram<W: Write>(mut out: W, spec: &Spectrogram) -> Result<()> {
    let (bins, frames) = spec.shape();
    let mut buf = Vec::with_capacity(16 + 4 * bins * frames);
    buf.extend_from_slice(TENSOR_FILE_MAGIC);
    buf.extend_from_slice(&TENSOR_FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bins as u32).to_le_bytes());
    buf.extend_from_slice(&(frames as u32).to_le_bytes());
    for v in spec.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a spectrogram file.
///
/// The header carries no normalization flag; it is recovered from the row
/// statistics (every row zero-mean/unit-variance or all-zero).
pub fn read_spectrogram<R: Read>(mut input: R) -> Result<Spectrogram> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::format("spectrogram", format!("short header: {e}")))?;
    if &header[..4] != TENSOR_FILE_MAGIC {
        return Err(Error::format("spectrogram", "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != TENSOR_FILE_VERSION {
        return Err(Error::format("spectrogram", format!("unsupported version {version}")));
    }
    let (bins, frames) = (word(8) as usize, word(12) as usize);
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != 4 * bins * frames {
        return Err(Error::format(
            "spectrogram",
            format!("expected {} payload bytes, found {}", 4 * bins * frames, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((bins, frames), data)
        .map_err(|e| Error::format("spectrogram", e.to_string()))?;
    let normalized = looks_normalized(&values);
    Ok(Spectrogram::new(values, normalized))
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let spec = Spectrogram::new(array![[1.5f32, -2.0]], false);
        let mut bytes = Vec::new();
        write_spectrogram(&mut bytes, &spec).unwrap();
        assert_eq!(&bytes[..4], b"FSSR");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.5f32.to_le_bytes());
        let back = read_spectrogram(bytes.as_slice()).unwrap();
        assert_eq!(back.values, spec.values);
        assert!(!back.normalized);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let spec = Spectrogram::new(array![[1.0f32, 2.0]], false);
        let mut bytes = Vec::new();
        write_spectrogram(&mut bytes, &spec).unwrap();
        bytes.pop();
        assert!(read_spectrogram(bytes.as_slice()).is_err());
    }
}
