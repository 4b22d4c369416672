//! On-disk formats. Everything binary is little-endian.
//!
//! * points: text, a `N 3` header line then `N` lines of three decimals;
//! * pixel indices: text, a `N 1` header then `N` integers;
//! * images: `u32` H, W, 3 then `H·W·3` `f32` values, row-major;
//! * weights: `VPWT`, `u32` version, `u32` count, then per tensor a `u32`
//!   name length, the UTF-8 name, `u32` rank, `rank` `u32` dims and the
//!   `f64` data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use posevit_core::Tensor;
use thiserror::Error;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"VPWT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {msg}")]
    Parse { path: PathBuf, offset: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io { path: path.into(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| FormatError::Io { path: dir.into(), source })?;
    }
    fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.into(), source })
}

/// Whitespace-separated token reader that remembers byte offsets.
struct Tokens<'a> {
    path: &'a Path,
    text: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| FormatError::Parse {
            path: path.into(),
            offset: e.valid_up_to(),
            msg: "invalid UTF-8".into(),
        })?;
        Ok(Tokens { path, text, pos: 0 })
    }

    fn err(&self, offset: usize, msg: impl Into<String>) -> FormatError {
        FormatError::Parse { path: self.path.into(), offset, msg: msg.into() }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let rest = &self.text[self.pos..];
        let skip = rest.len() - rest.trim_start().len();
        let start = self.pos + skip;
        let len = self.text[start..].find(char::is_whitespace).unwrap_or(self.text.len() - start);
        if len == 0 {
            return Err(self.err(start, format!("unexpected end of file, expected {what}")));
        }
        self.pos = start + len;
        Ok((start, &self.text[start..start + len]))
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let (at, tok) = self.next(what)?;
        tok.parse().map_err(|_| self.err(at, format!("expected {what}, found {tok:?}")))
    }

    fn finish(&self) -> Result<()> {
        let rest = &self.text[self.pos..];
        let skip = rest.len() - rest.trim_start().len();
        if self.pos + skip < self.text.len() {
            return Err(self.err(self.pos + skip, "trailing data"));
        }
        Ok(())
    }
}

pub fn points_to_string(t: &Tensor) -> String {
    let mut s = format!("{} 3\n", t.rows());
    for i in 0..t.rows() {
        let r = t.row(i);
        let _ = writeln!(s, "{} {} {}", r[0], r[1], r[2]);
    }
    s
}

pub fn write_points(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, points_to_string(t).as_bytes())
}

pub fn parse_points(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut tok = Tokens::new(path, bytes)?;
    let n: usize = tok.parse("point count")?;
    let (at, cols) = tok.next("column count")?;
    if cols != "3" {
        return Err(tok.err(at, format!("expected 3 columns, found {cols:?}")));
    }
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 * n {
        let (at, t) = tok.next("coordinate")?;
        let v: f64 = t.parse().map_err(|_| tok.err(at, format!("expected coordinate, found {t:?}")))?;
        if !v.is_finite() {
            return Err(tok.err(at, "non-finite coordinate"));
        }
        data.push(v);
    }
    tok.finish()?;
    Ok(Tensor::new(&[n, 3], data).expect("n × 3"))
}

pub fn read_points(path: &Path) -> Result<Tensor> {
    parse_points(path, &read(path)?)
}

pub fn write_indices(path: &Path, idx: &[usize]) -> Result<()> {
    let mut s = format!("{} 1\n", idx.len());
    for i in idx {
        let _ = writeln!(s, "{i}");
    }
    write_file(path, s.as_bytes())
}

pub fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let mut tok = Tokens::new(path, &bytes)?;
    let n: usize = tok.parse("index count")?;
    let (at, cols) = tok.next("column count")?;
    if cols != "1" {
        return Err(tok.err(at, format!("expected 1 column, found {cols:?}")));
    }
    let idx = (0..n).map(|_| tok.parse("pixel index")).collect::<Result<Vec<usize>>>()?;
    tok.finish()?;
    Ok(idx)
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> FormatError {
        FormatError::Parse { path: self.path.into(), offset, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(self.pos, format!("{} bytes of trailing data", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn image_to_bytes(t: &Tensor) -> Vec<u8> {
    let &[h, w, c] = t.shape() else { panic!("image must be [H, W, 3], got {:?}", t.shape()) };
    let mut out = Vec::with_capacity(12 + 4 * t.len());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &image_to_bytes(t))
}

pub fn parse_image(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { path, bytes, pos: 0 };
    let h = r.u32("image height")? as usize;
    let w = r.u32("image width")? as usize;
    let at = r.pos;
    let c = r.u32("channel count")? as usize;
    if c != 3 {
        return Err(r.err(at, format!("expected 3 channels, found {c}")));
    }
    let n = h.checked_mul(w).and_then(|v| v.checked_mul(3)).ok_or_else(|| r.err(0, "image dimensions overflow"))?;
    let raw = r.take(4 * n, "pixel data")?;
    let data: Vec<f64> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(r.err(12 + 4 * k, "non-finite pixel value"));
    }
    r.finish()?;
    Ok(Tensor::new(&[h, w, 3], data).expect("h × w × 3"))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    parse_image(path, &read(path)?)
}

pub fn weights_to_bytes<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let items: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_weights(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(r.err(0, "not a weights file (bad magic)"));
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(r.err(at, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| r.err(at, "name is not UTF-8"))?.to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err(r.pos, "tensor size overflows"))?;
        let raw = r.take(8usize.saturating_mul(n), "tensor data")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.err(at, format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_weights<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    write_file(path, &weights_to_bytes(tensors))
}

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    parse_weights(path, &read(path)?)
}
