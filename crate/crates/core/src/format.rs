//! Little-endian binary containers shared by the model, coder, activation
//! and calibration files.
//!
//! Every file starts with a 4-byte magic and a `u32` format version. Named
//! tensors are encoded as `name_len: u32, name: utf8, rows: u32, cols: u32`
//! followed by `rows * cols` little-endian `f32` values in row-major order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub type Magic = [u8; 4];

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = tmp_path(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Opens `path`, checks the magic, and hands the reader plus version to `f`.
/// Truncation and decoding failures are reported against the file.
pub fn read_file<T>(
    path: &Path,
    magic: &Magic,
    f: impl FnOnce(&mut dyn Read, u32) -> std::result::Result<T, String>,
) -> Result<T> {
    let mut r = BufReader::new(File::open(path)?);
    let fail = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut got = [0u8; 4];
    r.read_exact(&mut got)
        .map_err(|e| fail(format!("cannot read magic: {e}")))?;
    if &got != magic {
        return Err(fail(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| fail(format!("cannot read version: {e}")))?;
    f(&mut r, version).map_err(fail)
}

pub fn write_header(w: &mut dyn Write, magic: &Magic, version: u32) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)
}

pub fn write_str(w: &mut dyn Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn read_str(r: &mut dyn Read) -> std::result::Result<String, String> {
    let n = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    if n > 1 << 20 {
        return Err(format!("string length {n} is implausible"));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| e.to_string())?;
    String::from_utf8(buf).map_err(|e| e.to_string())
}

pub fn write_f32s(w: &mut dyn Write, xs: &[f32]) -> std::io::Result<()> {
    for &x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_f32s(r: &mut dyn Read, n: usize) -> std::result::Result<Vec<f32>, String> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|e| format!("reading {n} floats: {e}"))?;
    Ok(out)
}

pub fn write_tensor(w: &mut dyn Write, name: &str, m: &Matrix) -> std::io::Result<()> {
    write_str(w, name)?;
    w.write_u32::<LittleEndian>(m.rows() as u32)?;
    w.write_u32::<LittleEndian>(m.cols() as u32)?;
    write_f32s(w, m.data())
}

pub fn read_tensor(r: &mut dyn Read) -> std::result::Result<(String, Matrix), String> {
    let name = read_str(r)?;
    let rows = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    if rows.saturating_mul(cols) > 1 << 30 {
        return Err(format!("tensor {name} has implausible shape {rows}x{cols}"));
    }
    let data = read_f32s(r, rows * cols)?;
    let m = Matrix::new(rows, cols, data).map_err(|e| e.to_string())?;
    Ok((name, m))
}

/// Reads `n` named tensors and checks their names against `expected`.
pub fn read_tensors_named(
    r: &mut dyn Read,
    expected: &[String],
) -> std::result::Result<Vec<Matrix>, String> {
    let n = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    if n != expected.len() {
        return Err(format!("expected {} tensors, found {n}", expected.len()));
    }
    expected
        .iter()
        .map(|want| {
            let (name, m) = read_tensor(r)?;
            if &name != want {
                return Err(format!("expected tensor {want}, found {name}"));
            }
            Ok(m)
        })
        .collect()
}

pub fn write_tensors_named(
    w: &mut dyn Write,
    tensors: &[(String, &Matrix)],
) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, m) in tensors {
        write_tensor(w, name, m)?;
    }
    Ok(())
}

pub fn u32_field(r: &mut dyn Read, what: &str) -> std::result::Result<usize, String> {
    r.read_u32::<LittleEndian>()
        .map(|v| v as usize)
        .map_err(|e| format!("reading {what}: {e}"))
}
