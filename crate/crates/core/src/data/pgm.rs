//! Binary PGM ("P5") image files with maxval 255. Masks use {0, 255}.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::PgmBadHeader(format!(
            "pixel count {} does not match {width}x{height}",
            pixels.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 {
        return Err(Error::PgmBadHeader("file shorter than a magic number".into()));
    }
    match &bytes[..2] {
        b"P5" => {}
        b"P2" => return Err(Error::PgmAsciiUnsupported),
        other => {
            return Err(Error::PgmBadMagic {
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // Skip whitespace and `#` comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::PgmBadHeader("truncated header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::PgmBadHeader("expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::PgmBadHeader("non-utf8 header".into()))?
            .parse()
            .map_err(|_| Error::PgmBadHeader("header field out of range".into()))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::PgmBadHeader(format!(
            "maxval must be 255 for 8-bit data, got {maxval}"
        )));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::PgmBadHeader("missing separator after maxval".into())),
    }
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::PgmTruncated {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::PgmBadHeader(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok((height, width, payload.to_vec()))
}
