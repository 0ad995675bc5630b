//! Sample files.
//!
//! * 2D samples: CSV with header `x,y,label`; `label` is `-1` for
//!   unconditional samples. Values are written as the shortest `f64` text
//!   of the stored float, so 32-bit samples read back exactly.
//! * Images: NPY v1.0, little-endian `<f4`, shape `(n, channels, h, w)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

pub fn write_samples_csv<F: Float>(path: &Path, samples: &Tensor<F>, labels: Option<&[usize]>) -> Result<()> {
    let shape = samples.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::invalid(format!("CSV samples must be [n, 2], got {shape:?}")));
    }
    let mut out = String::from("x,y,label\n");
    for (i, row) in samples.data().chunks(2).enumerate() {
        let label = labels.map_or(-1, |l| l[i] as i64);
        writeln!(out, "{},{},{}", row[0].as_f64(), row[1].as_f64(), label).expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns the `[n, 2]` points and the label column.
pub fn read_samples_csv(path: &Path) -> Result<(Tensor<f64>, Vec<i64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("x,y,label") {
        return Err(Error::invalid(format!("{}: missing x,y,label header", path.display())));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("{}:{}: bad number {s:?}", path.display(), n + 2)))
        };
        if cols.len() != 3 {
            return Err(Error::invalid(format!("{}:{}: expected 3 columns", path.display(), n + 2)));
        }
        points.push(parse(cols[0])?);
        points.push(parse(cols[1])?);
        labels.push(parse(cols[2])? as i64);
    }
    let n = labels.len();
    Ok((Tensor::new(vec![n, 2], points)?, labels))
}

pub fn write_samples_npy<F: Float>(path: &Path, samples: &Tensor<F>) -> Result<()> {
    let dims: Vec<String> = samples.shape().iter().map(usize::to_string).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // magic(6) + version(2) + len(2) + header + '\n' is a multiple of 64
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + samples.len() * 4);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in samples.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads NPY files written by [`write_samples_npy`] (`<f4`, C order).
pub fn read_samples_npy(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(bad("not an NPY v1.0 file"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = bytes
        .get(10..10 + hlen)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad("truncated header"))?;
    if !header.contains("'descr': '<f4'") || !header.contains("'fortran_order': False") {
        return Err(bad("only little-endian f32 in C order is supported"));
    }
    let inner = header
        .split("'shape': (")
        .nth(1)
        .and_then(|r| r.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .map(|d| d.parse::<usize>().map_err(|_| bad("bad shape")))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[10 + hlen..];
    if body.len() != crate::numerics::numel(&shape) * 4 {
        return Err(bad("payload size does not match shape"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let t = Tensor::<f32>::new(vec![2, 2], vec![0.1, -3.25e-7, 1e20, 7.0]).unwrap();
        write_samples_csv(&p, &t, Some(&[3, 0])).unwrap();
        let (back, labels) = read_samples_csv(&p).unwrap();
        assert_eq!(labels, vec![3, 0]);
        let as32: Vec<f32> = back.data().iter().map(|&v| v as f32).collect();
        assert_eq!(as32, t.data());
    }

    #[test]
    fn empty_csv_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_samples_csv(&p, &Tensor::<f32>::new(vec![0, 2], vec![]).unwrap(), None).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y,label\n");
        assert_eq!(read_samples_csv(&p).unwrap().0.shape(), &[0, 2]);
    }

    #[test]
    fn npy_header_is_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.npy");
        let t = Tensor::<f32>::zeros(vec![3, 1, 8, 8]);
        write_samples_npy(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes.len(), 10 + hlen + 3 * 64 * 4);
        let header = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(header.contains("'shape': (3, 1, 8, 8)"));
    }

    #[test]
    fn npy_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.npy");
        let t = Tensor::<f32>::new(vec![2, 1, 2, 2], (0..8).map(|v| v as f32 * 0.5 - 1.0).collect()).unwrap();
        write_samples_npy(&p, &t).unwrap();
        let back = read_samples_npy(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.cast::<f32>().data(), t.data());
        fs::write(&p, b"junk").unwrap();
        assert!(read_samples_npy(&p).is_err());
    }
}
