//! `FBNK` feature files: magic, u32 LE rows, u32 LE cols, then
//! `rows * cols` little-endian f32 values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureMatrix;
use crate::error::{Error, Result};

pub const FBNK_MAGIC: &[u8; 4] = b"FBNK";

pub fn write_fbnk<W: Write>(mut w: W, fbank: &FeatureMatrix) -> Result<()> {
    w.write_all(FBNK_MAGIC)?;
    w.write_all(&(fbank.frames() as u32).to_le_bytes())?;
    w.write_all(&(fbank.dims() as u32).to_le_bytes())?;
    for &v in fbank.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_fbnk<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FBNK_MAGIC {
        return Err(Error::format("FBNK", format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::format(
            "FBNK",
            format!("{rows}x{cols} header but {} payload bytes", bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    FeatureMatrix::new(rows, cols, values)
}

pub fn write_fbnk_file(path: &Path, fbank: &FeatureMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fbnk(&mut w, fbank)?;
    w.flush()?;
    Ok(())
}

pub fn read_fbnk_file(path: &Path) -> Result<FeatureMatrix> {
    read_fbnk(BufReader::new(File::open(path)?)).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let fb = FeatureMatrix::new(2, 1, vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_fbnk(&mut buf, &fb).unwrap();
        let mut expected = b"FBNK".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_fbnk(buf.as_slice()).unwrap(), fb);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_fbnk(&b"FBNX\x01\0\0\0\x01\0\0\0\0\0\0\0"[..]), Err(Error::Format { .. })));
        assert!(matches!(read_fbnk(&b"FBNK\x01\0\0\0\x02\0\0\0\0\0\0\0"[..]), Err(Error::Format { .. })));
    }
}
