//! `NENC` matrix container.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"NENC"`            |
//! | 4      | 4    | version, `u32` = 1         |
//! | 8      | 8    | rows, `u64`                |
//! | 16     | 8    | cols, `u64`                |
//! | 24     | 4·rows·cols | `f32` payload, row-major |
//!
//! Several containers may be concatenated in one file ([`write_blocks`]).
//! Values are held as `f64` in memory and rounded to `f32` on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NENC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 24;

pub fn write_matrix_to<W: Write>(m: &DMatrix<f64>, w: &mut W) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_f32::<LittleEndian>(m[(r, c)] as f32)?;
        }
    }
    Ok(())
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if !(m[(r, c)] as f32).is_finite() {
                return Err(Error::NonFiniteValue { row: r, col: c });
            }
        }
    }
    Ok(())
}

pub fn write_matrix(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_blocks(&[m], path)
}

pub fn write_blocks(blocks: &[&DMatrix<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for m in blocks {
        check_finite(m)?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for m in blocks {
        write_matrix_to(m, &mut w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one container. Returns `Ok(None)` at a clean end of stream.
fn read_one<R: Read>(r: &mut R, path: &Path) -> Result<Option<DMatrix<f64>>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(Error::TruncatedPayload {
                    expected: HEADER_LEN,
                    path: path.to_path_buf(),
                })
            }
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            path: path.to_path_buf(),
        });
    }
    let truncated = |expected| Error::TruncatedPayload {
        expected,
        path: path.to_path_buf(),
    };
    let version = r.read_u32::<LittleEndian>().map_err(|_| truncated(HEADER_LEN))?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = r.read_u64::<LittleEndian>().map_err(|_| truncated(HEADER_LEN))?;
    let cols = r.read_u64::<LittleEndian>().map_err(|_| truncated(HEADER_LEN))?;
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| Error::SchemaMismatch(format!("matrix {rows}x{cols} is too large")))?;
    let (rows, cols) = (rows as usize, cols as usize);
    let mut payload = Vec::new();
    r.by_ref()
        .take(count * 4)
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() as u64 != count * 4 {
        return Err(truncated(count * 4));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        let (row, col) = (i / cols.max(1), i % cols.max(1));
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { row, col });
        }
        m[(row, col)] = v as f64;
    }
    Ok(Some(m))
}

pub fn read_blocks(path: impl AsRef<Path>) -> Result<Vec<DMatrix<f64>>> {
    let path = path.as_ref();
    let mut r = BufReader::new(open(path)?);
    let mut out = Vec::new();
    while let Some(m) = read_one(&mut r, path)? {
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

/// Reads a binary container, or a CSV file when the extension is `.csv`.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return read_csv(path);
    }
    let mut r = BufReader::new(open(path)?);
    read_one(&mut r, path)?.ok_or_else(|| Error::TruncatedPayload {
        expected: HEADER_LEN,
        path: path.to_path_buf(),
    })
}

/// CSV with a `f0,f1,...` header row and one matrix row per line.
pub fn read_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let cols = reader.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        if record.len() != cols {
            return Err(Error::SchemaMismatch(format!(
                "row {rows} of {} has {} fields, header has {cols}",
                path.display(),
                record.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::SchemaMismatch(format!("unparseable value {field:?} at ({rows}, {col})"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row: rows, col });
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_csv(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record((0..m.ncols()).map(|j| format!("f{j}")))?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-10.0..10.0))
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nenc");
        let m = random(7, 13, 1);
        write_matrix(&m, &path).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.shape(), (7, 13));
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // already-f32 values survive bit-exactly
        write_matrix(&back, &path).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), back);
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nenc");
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -0.5]);
        write_matrix(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 24 + 6 * 4);
        assert_eq!(&bytes[0..4], b"NENC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        // row-major: second value is (0, 1)
        assert_eq!(&bytes[28..32], &2.0f32.to_le_bytes());
        assert_eq!(&bytes[44..48], &(-0.5f32).to_le_bytes());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nenc");
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0u8; 20]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::BadMagic { .. })));

        let good = dir.path().join("good.nenc");
        write_matrix(&random(3, 3, 2), &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::TruncatedPayload { .. })));

        std::fs::write(&path, b"NEN").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::TruncatedPayload { .. })));

        assert!(matches!(
            read_matrix(dir.path().join("absent.nenc")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn non_finite_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.nenc");
        let mut m = random(2, 2, 3);
        m[(1, 0)] = f64::NAN;
        assert!(matches!(
            write_matrix(&m, &path),
            Err(Error::NonFiniteValue { row: 1, col: 0 })
        ));
        // hand-craft a file holding an infinity
        let mut bytes = Vec::new();
        write_matrix_to(&DMatrix::from_element(1, 2, 1.0), &mut bytes).unwrap();
        bytes[28..32].copy_from_slice(&f32::INFINITY.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_matrix(&path),
            Err(Error::NonFiniteValue { row: 0, col: 1 })
        ));
    }

    #[test]
    fn csv_and_binary_twins_agree() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("m.csv");
        std::fs::write(&csv_path, "f0,f1,f2\n1.5,2,-3\n0.25,4e-1,5\n6,7,8.125\n").unwrap();
        let from_csv = read_matrix(&csv_path).unwrap();
        let bin = dir.path().join("m.nenc");
        write_matrix(&from_csv, &bin).unwrap();
        let from_bin = read_matrix(&bin).unwrap();
        assert_eq!(from_csv.shape(), (3, 3));
        for (a, b) in from_csv.iter().zip(from_bin.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(from_csv[(1, 1)], 0.4);
    }

    #[test]
    fn multi_block_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blocks.nenc");
        let a = random(2, 3, 4);
        let b = DMatrix::<f64>::zeros(0, 5);
        let c = random(4, 1, 5);
        write_blocks(&[&a, &b, &c], &path).unwrap();
        let back = read_blocks(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].shape(), (0, 5));
        assert_eq!(back[2].shape(), (4, 1));
    }
}
