//! Binary PGM (P5) and PPM (P6) rasters, 8 bits per sample. The only image
//! codec in this project: trivially bit-exact with no external decoders.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale raster; label rasters store object indices as pixel values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

fn write_header(buf: &mut Vec<u8>, magic: &str, w: usize, h: usize) {
    buf.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
}

pub fn write_pgm(path: &Path, img: &Gray) -> Result<()> {
    if img.data.len() != img.w * img.h {
        return Err(Error::Shape(format!(
            "pgm raster {}x{} with {} samples",
            img.w,
            img.h,
            img.data.len()
        )));
    }
    let mut buf = Vec::with_capacity(img.data.len() + 32);
    write_header(&mut buf, "P5", img.w, img.h);
    buf.extend_from_slice(&img.data);
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &Rgb) -> Result<()> {
    if img.data.len() != img.w * img.h * 3 {
        return Err(Error::Shape(format!(
            "ppm raster {}x{} with {} samples",
            img.w,
            img.h,
            img.data.len()
        )));
    }
    let mut buf = Vec::with_capacity(img.data.len() + 32);
    write_header(&mut buf, "P6", img.w, img.h);
    buf.extend_from_slice(&img.data);
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Pull whitespace-separated header tokens, honoring `#` comments.
fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<usize>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Parse(format!(
                "{}: truncated raster header",
                path.display()
            )));
        }
        let tok = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| Error::Parse(format!("{}: non-ascii header", path.display())))?;
        tokens.push(tok.parse::<usize>().map_err(|_| {
            Error::Parse(format!("{}: bad header token {tok}", path.display()))
        })?);
    }
    // Exactly one whitespace byte separates the header from the payload.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Parse(format!(
            "{}: missing header terminator",
            path.display()
        )));
    }
    Ok((tokens, i + 1))
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::Parse(format!("{}: not a P5 raster", path.display())));
    }
    let (tokens, payload) = header_tokens(&bytes[2..], 3, path)?;
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(Error::Parse(format!(
            "{}: unsupported maxval {maxval}",
            path.display()
        )));
    }
    let start = 2 + payload;
    if bytes.len() != start + w * h {
        return Err(Error::Parse(format!(
            "{}: payload {} bytes, expected {}",
            path.display(),
            bytes.len() - start,
            w * h
        )));
    }
    Ok(Gray {
        w,
        h,
        data: bytes[start..].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Rgb> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::Parse(format!("{}: not a P6 raster", path.display())));
    }
    let (tokens, payload) = header_tokens(&bytes[2..], 3, path)?;
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(Error::Parse(format!(
            "{}: unsupported maxval {maxval}",
            path.display()
        )));
    }
    let start = 2 + payload;
    if bytes.len() != start + w * h * 3 {
        return Err(Error::Parse(format!(
            "{}: payload {} bytes, expected {}",
            path.display(),
            bytes.len() - start,
            w * h * 3
        )));
    }
    Ok(Rgb {
        w,
        h,
        data: bytes[start..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("aot_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pgm_roundtrip_bytes() {
        let img = Gray {
            w: 3,
            h: 2,
            data: vec![0, 1, 2, 253, 254, 255],
        };
        let p = tmp("a.pgm");
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    }

    #[test]
    fn ppm_roundtrip() {
        let img = Rgb {
            w: 2,
            h: 2,
            data: (0..12).collect(),
        };
        let p = tmp("a.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let p = tmp("c.pgm");
        fs::write(&p, b"P5\n# made by hand\n2 1\n255\nAB").unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!((img.w, img.h), (2, 1));
        assert_eq!(img.data, b"AB");
    }

    #[test]
    fn truncated_payload_rejected() {
        let p = tmp("t.pgm");
        fs::write(&p, b"P5\n4 4\n255\nxy").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Parse(_))));
    }
}
