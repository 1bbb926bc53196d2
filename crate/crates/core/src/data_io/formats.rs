use std::path::Path;

use crate::error::{DnaError, Result};
use crate::tensor::{Real, Tensor};

pub const RAW_IMAGE_MAGIC: &[u8; 4] = b"IMG1";
pub const RAW_SINOGRAM_MAGIC: &[u8; 4] = b"SIN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawKind {
    Image,
    Sinogram,
}

impl RawKind {
    fn magic(self) -> &'static [u8; 4] {
        match self {
            RawKind::Image => RAW_IMAGE_MAGIC,
            RawKind::Sinogram => RAW_SINOGRAM_MAGIC,
        }
    }
}

fn plane(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] | [1, 1, r, c] => Ok((*r, *c)),
        s => Err(DnaError::shape(
            what,
            format!("expected one [rows, cols] plane, got {:?}", s),
        )),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| DnaError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| DnaError::io(path, e))
}

/// Magic, rows and cols as u32 LE, then f32 LE values row-major.
pub fn encode_raw(t: &Tensor, kind: RawKind) -> Result<Vec<u8>> {
    let (r, c) = plane(t, "save_raw")?;
    let mut out = kind.magic().to_vec();
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a RAW file into `[1, 1, rows, cols]`.
pub fn decode_raw(buf: &[u8], kind: RawKind) -> Result<Tensor> {
    if buf.len() < 12 {
        return Err(DnaError::Truncated {
            expected: 12,
            actual: buf.len(),
        });
    }
    if &buf[..4] != kind.magic() {
        return Err(DnaError::Parse {
            offset: 0,
            detail: format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(kind.magic()),
                String::from_utf8_lossy(&buf[..4])
            ),
        });
    }
    let r = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if r == 0 || c == 0 {
        return Err(DnaError::Parse {
            offset: 4,
            detail: format!("empty dimensions {}x{}", r, c),
        });
    }
    let expected = r
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| DnaError::Parse {
            offset: 4,
            detail: format!("dimensions {}x{} overflow", r, c),
        })?;
    if buf.len() != expected {
        return Err(DnaError::Truncated {
            expected,
            actual: buf.len(),
        });
    }
    let data = buf[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Real)
        .collect();
    Tensor::from_vec(&[1, 1, r, c], data)
}

pub fn save_raw(path: &Path, t: &Tensor, kind: RawKind) -> Result<()> {
    write(path, &encode_raw(t, kind)?)
}

pub fn load_raw(path: &Path, kind: RawKind) -> Result<Tensor> {
    decode_raw(&read(path)?, kind).map_err(|e| with_path(path, e))
}

pub fn save_raw_image(path: &Path, img: &Tensor) -> Result<()> {
    save_raw(path, img, RawKind::Image)
}

pub fn load_raw_image(path: &Path) -> Result<Tensor> {
    load_raw(path, RawKind::Image)
}

pub fn save_raw_sinogram(path: &Path, sino: &Tensor) -> Result<()> {
    save_raw(path, sino, RawKind::Sinogram)
}

pub fn load_raw_sinogram(path: &Path) -> Result<Tensor> {
    load_raw(path, RawKind::Sinogram)
}

fn with_path(path: &Path, e: DnaError) -> DnaError {
    match e {
        DnaError::Parse { offset, detail } => DnaError::Parse {
            offset,
            detail: format!("{}: {}", path.display(), detail),
        },
        DnaError::Truncated { expected, actual } => DnaError::Parse {
            offset: actual,
            detail: format!(
                "{}: truncated, expected {} bytes, found {}",
                path.display(),
                expected,
                actual
            ),
        },
        other => other,
    }
}

/// 16-bit binary PGM of a `[0, 1]` plane; values are clamped and rounded.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (r, c) = plane(t, "save_pgm")?;
    let mut out = format!("P5\n{} {}\n65535\n", c, r).into_bytes();
    for &v in t.data() {
        let q = ((v as f64).clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Reads 8- or 16-bit binary PGM into `[rows, cols]` scaled by `1 / maxval`.
pub fn decode_pgm(buf: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<(usize, String)> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DnaError::Parse {
                offset: start,
                detail: format!("missing {}", what),
            });
        }
        Ok((
            start,
            String::from_utf8_lossy(&buf[start..pos]).into_owned(),
        ))
    };
    let (_, magic) = token("magic")?;
    if magic != "P5" {
        return Err(DnaError::Parse {
            offset: 0,
            detail: format!("expected P5, found {:?}", magic),
        });
    }
    let mut num = |what: &str| -> Result<usize> {
        let (at, s) = token(what)?;
        s.parse().map_err(|_| DnaError::Parse {
            offset: at,
            detail: format!("bad {} {:?}", what, s),
        })
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(DnaError::Parse {
            offset: 0,
            detail: format!("unsupported header {}x{} maxval {}", w, h, maxval),
        });
    }
    // exactly one whitespace byte separates the header from the samples
    let start = pos + 1;
    let bytes = if maxval > 255 { 2 } else { 1 };
    let expected = start + w * h * bytes;
    if buf.len() < expected {
        return Err(DnaError::Truncated {
            expected,
            actual: buf.len(),
        });
    }
    let body = &buf[start..expected];
    let scale = 1.0 / maxval as f64;
    let data = if bytes == 2 {
        body.chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f64 * scale) as Real)
            .collect()
    } else {
        body.iter().map(|&b| (b as f64 * scale) as Real).collect()
    };
    Tensor::from_vec(&[h, w], data)
}

pub fn save_pgm(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &encode_pgm(t)?)
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&read(path)?).map_err(|e| with_path(path, e))
}
