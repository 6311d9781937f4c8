//! On-disk formats: the QTN query tensor container and binary PGM label maps.
//!
//! QTN layout (little-endian throughout):
//!
//! ```text
//! "QTNv0001"            8 bytes
//! T, N, D               3 x u32
//! values                T*N*D x f64, t-major, then query, then channel
//! "QTNEND\0\0"          8 bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ClipQueryTensor, LabelMap};

pub const QTN_MAGIC: &[u8; 8] = b"QTNv0001";
pub const QTN_END: &[u8; 8] = b"QTNEND\0\0";
const QTN_HEADER_LEN: u64 = 8 + 3 * 4;

/// Size in bytes of the QTN encoding of a `t x n x d` tensor.
pub fn qtn_encoded_len(t: usize, n: usize, d: usize) -> u64 {
    QTN_HEADER_LEN + 8 * (t * n * d) as u64 + QTN_END.len() as u64
}

pub fn encode_tensor(tensor: &ClipQueryTensor) -> Vec<u8> {
    let (t, n, d) = (tensor.t_len(), tensor.n_queries(), tensor.dim());
    let mut out = Vec::with_capacity(qtn_encoded_len(t, n, d) as usize);
    out.extend_from_slice(QTN_MAGIC);
    for dim in [t, n, d] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in tensor.iter_values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(QTN_END);
    out
}

/// Writes `tensor` as QTN; `sink_name` labels the sink in error messages.
pub fn write_tensor<W: Write>(tensor: &ClipQueryTensor, mut sink: W, sink_name: &str) -> Result<()> {
    sink.write_all(&encode_tensor(tensor))
        .and_then(|_| sink.flush())
        .map_err(|e| Error::io(sink_name, e))
}

pub fn save_tensor(tensor: &ClipQueryTensor, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_tensor(tensor, std::io::BufWriter::new(file), &path.display().to_string())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses a complete QTN byte buffer.
pub fn read_tensor(bytes: &[u8]) -> Result<ClipQueryTensor> {
    let found = bytes.len() as u64;
    if found < QTN_HEADER_LEN {
        // Check whatever prefix of the magic is present before reporting truncation.
        let prefix = &bytes[..bytes.len().min(8)];
        if prefix != &QTN_MAGIC[..prefix.len()] {
            return Err(Error::BadMagic { expected: "QTNv0001" });
        }
        return Err(Error::Truncated {
            needed: QTN_HEADER_LEN,
            found,
        });
    }
    if &bytes[..8] != QTN_MAGIC {
        return Err(Error::BadMagic { expected: "QTNv0001" });
    }
    let (t, n, d) = (
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
        read_u32(bytes, 16) as usize,
    );
    if t == 0 || n == 0 || d == 0 {
        return Err(Error::Format(format!(
            "QTN dimensions must be positive, got {t}x{n}x{d}"
        )));
    }
    let count = (t as u64)
        .checked_mul(n as u64)
        .and_then(|v| v.checked_mul(d as u64))
        .ok_or_else(|| Error::Format(format!("QTN dimensions overflow: {t}x{n}x{d}")))?;
    let needed = count
        .checked_mul(8)
        .and_then(|v| v.checked_add(QTN_HEADER_LEN + QTN_END.len() as u64))
        .ok_or_else(|| Error::Format(format!("QTN dimensions overflow: {t}x{n}x{d}")))?;
    if found < needed {
        return Err(Error::Truncated { needed, found });
    }
    if found > needed {
        return Err(Error::Format(format!(
            "{} unexpected bytes after QTN trailer",
            found - needed
        )));
    }
    let payload_end = (needed - QTN_END.len() as u64) as usize;
    if &bytes[payload_end..] != QTN_END {
        return Err(Error::Format("missing QTN end marker".into()));
    }
    let data: Vec<f64> = bytes[QTN_HEADER_LEN as usize..payload_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ClipQueryTensor::from_flat(t, n, d, data)
}

pub fn load_tensor(path: &Path) -> Result<ClipQueryTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensor(&bytes)
}

/// Binary PGM (P5, maxval 255); pixel value = class index.
pub fn encode_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    if labels.num_classes() > 256 {
        return Err(Error::domain(format!(
            "PGM stores at most 256 classes, map has {}",
            labels.num_classes()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend(labels.labels().iter().map(|&l| l as u8));
    Ok(out)
}

pub fn save_pgm(labels: &LabelMap, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(labels)?).map_err(|e| Error::io(path.display().to_string(), e))
}

struct PgmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PgmHeader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("PGM header: bad {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8], num_classes: usize) -> Result<LabelMap> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::BadMagic { expected: "P5" });
    }
    let mut header = PgmHeader { bytes, pos: 2 };
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval = header.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(header.pos) {
        Some(c) if c.is_ascii_whitespace() => header.pos += 1,
        _ => return Err(Error::Format("PGM header not terminated".into())),
    }
    let raster = &bytes[header.pos..];
    let needed = width * height;
    if raster.len() < needed {
        return Err(Error::Truncated {
            needed: (header.pos + needed) as u64,
            found: bytes.len() as u64,
        });
    }
    LabelMap::new(
        height,
        width,
        num_classes,
        raster[..needed].iter().map(|&b| u32::from(b)).collect(),
    )
}

pub fn load_pgm(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_pgm(&bytes, num_classes)
}
