//! Checkpoint container: named tensors plus string metadata.
//!
//! Layout (all text lines end in `\n`, UTF-8):
//!
//! ```text
//! REMIX-CHECKPOINT
//! version 1
//! dtype f32
//! meta <key> <value...>          zero or more, value runs to end of line
//! tensor <name> <d0,d1,...>      zero or more, `-` for a scalar shape
//! data
//! <payload>
//! ```
//!
//! The payload is the row-major values of every tensor in header order,
//! little-endian, 4 bytes per value for `f32` and 8 for `f64`, with no
//! padding. Keys and tensor names contain no whitespace. Entries are
//! written sorted by name.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &str = "REMIX-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F: Float> {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> Default for Checkpoint<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint(format!("invalid entry name {name:?}")));
    }
    Ok(())
}

impl<F: Float> Checkpoint<F> {
    pub fn new() -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key:?}")))
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC}\nversion {FORMAT_VERSION}\ndtype {}\n", F::DTYPE);
        for (k, v) in &self.meta {
            check_name(k)?;
            if v.contains('\n') {
                return Err(Error::Checkpoint(format!("meta value for {k} contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            check_name(name)?;
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!("tensor {name} {dims}\n"));
        }
        header.push_str("data\n");
        let mut out = header.into_bytes();
        for t in self.tensors.values() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parse a checkpoint written at any supported precision; values are
    /// converted to `F` (exact when the stored dtype matches).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a remix checkpoint"));
        }
        let version = next_line()?;
        match version.strip_prefix("version ").map(str::parse::<u32>) {
            Some(Ok(FORMAT_VERSION)) => {}
            _ => return Err(Error::Checkpoint(format!("unsupported {version:?}"))),
        }
        let dtype = next_line()?
            .strip_prefix("dtype ")
            .ok_or_else(|| bad("missing dtype"))?
            .to_string();
        let width = match dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };

        let mut meta = BTreeMap::new();
        let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "data" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dims) = rest.split_once(' ').ok_or_else(|| bad("malformed tensor line"))?;
                let shape = if dims == "-" {
                    Vec::new()
                } else {
                    dims.split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| bad("malformed tensor shape")))
                        .collect::<Result<Vec<_>>>()?
                };
                layout.push((name.to_string(), shape));
            } else {
                return Err(Error::Checkpoint(format!("unexpected header line {line:?}")));
            }
        }

        let mut tensors = BTreeMap::new();
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let end = pos + n * width;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("payload truncated at tensor {name}")));
            }
            let data: Vec<F> = bytes[pos..end]
                .chunks_exact(width)
                .map(|c| if width == 4 { F::lit(f32::read_le(c) as f64) } else { F::lit(f64::read_le(c)) })
                .collect();
            pos = end;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Write via a temporary sibling file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_value_exact(
            a in prop::collection::vec(-1e30f32..1e30, 1..40),
            b in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6),
        ) {
            let mut c32 = Checkpoint::<f32>::new();
            c32.set_meta("arch", "mlp");
            c32.insert("w", Tensor::new(vec![a.len()], a.clone()).unwrap());
            c32.insert("s", Tensor::scalar(a[0]));
            let back = Checkpoint::<f32>::from_bytes(&c32.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back, &c32);

            let mut c64 = Checkpoint::<f64>::new();
            c64.insert("m", Tensor::new(vec![2, 3], b.clone()).unwrap());
            let back = Checkpoint::<f64>::from_bytes(&c64.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.tensor("m").unwrap().data(), &b[..]);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::<f32>::from_bytes(b"hello\n").is_err());
        let mut c = Checkpoint::<f32>::new();
        c.insert("w", Tensor::ones(vec![4]));
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut c = Checkpoint::<f32>::new();
        c.set_meta("note", "two words");
        c.insert("w", Tensor::from_f64(vec![2], &[0.1, -0.2]).unwrap());
        c.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta("note").unwrap(), "two words");
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn f32_file_loads_as_f64_exactly() {
        let mut c = Checkpoint::<f32>::new();
        c.insert("w", Tensor::new(vec![1], vec![0.1f32]).unwrap());
        let wide = Checkpoint::<f64>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(wide.tensor("w").unwrap().data()[0], 0.1f32 as f64);
    }
}
