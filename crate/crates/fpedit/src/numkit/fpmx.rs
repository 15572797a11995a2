//! FPMX: the on-disk matrix record.
//!
//! Layout: magic `FPMX`, `u32` row count, `u32` column count, then
//! `rows * cols` little-endian `f64` values in row-major order. Every
//! multi-matrix artifact in this crate (checkpoints, edit state) is a
//! sequence of these records.

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use std::io::{Read, Write};

pub const FPMX_MAGIC: &[u8; 4] = b"FPMX";

/// Refuse to allocate for absurd headers (corrupt or hostile files).
const MAX_ENTRIES: u64 = 1 << 28;

pub fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_all(FPMX_MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::parse(format!("truncated matrix record: {e}")))?;
    if &magic != FPMX_MAGIC {
        return Err(Error::parse(format!(
            "bad matrix magic {:?}, expected {:?}",
            magic, FPMX_MAGIC
        )));
    }
    let rows = read_u32(r)? as u64;
    let cols = read_u32(r)? as u64;
    let entries = rows * cols;
    if entries > MAX_ENTRIES {
        return Err(Error::parse(format!("matrix header claims {entries} entries, refusing")));
    }
    let mut data = Vec::with_capacity(entries as usize);
    let mut buf = [0u8; 8];
    for i in 0..entries {
        r.read_exact(&mut buf)
            .map_err(|e| Error::parse(format!("truncated matrix payload at entry {i}: {e}")))?;
        let v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(Error::parse(format!("non-finite matrix entry at index {i}: {v}")));
        }
        data.push(v);
    }
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::parse(format!("truncated u32 field: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Length-prefixed UTF-8 blob, used for embedded JSON headers.
pub fn write_text(w: &mut impl Write, text: &str) -> Result<()> {
    write_u32(w, text.len() as u32)?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_text(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > (MAX_ENTRIES as usize) {
        return Err(Error::parse(format!("text header claims {len} bytes, refusing")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::parse(format!("truncated text blob: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::parse(format!("text blob is not UTF-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::matrix::randn_matrix;
    use rand::SeedableRng;

    #[test]
    fn round_trips_bytes_exactly() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let m = randn_matrix(7, 3, 1.0, &mut rng);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let back = read_matrix(&mut buf.as_slice()).unwrap();
        assert_eq!(m, back);

        // Writing the read-back matrix reproduces identical bytes.
        let mut buf2 = Vec::new();
        write_matrix(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn zero_column_matrix_round_trips() {
        let m = Matrix::zeros(5, 0);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let back = read_matrix(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), (5, 0));
    }

    #[test]
    fn rejects_bad_magic_truncation_and_nan() {
        let m = Matrix::zeros(2, 2);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_matrix(&mut bad.as_slice()), Err(crate::Error::Parse(_))));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_matrix(&mut &short[..]), Err(crate::Error::Parse(_))));

        let mut nan = buf.clone();
        let nan_bytes = f64::NAN.to_le_bytes();
        nan[12..20].copy_from_slice(&nan_bytes);
        assert!(matches!(read_matrix(&mut nan.as_slice()), Err(crate::Error::Parse(_))));
    }

    #[test]
    fn text_blob_round_trips() {
        let mut buf = Vec::new();
        write_text(&mut buf, "hello {\"a\":1}").unwrap();
        assert_eq!(read_text(&mut buf.as_slice()).unwrap(), "hello {\"a\":1}");
    }
}
