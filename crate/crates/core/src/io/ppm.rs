//! Binary PPM (P6) and PGM (P5) readers and writers.

use super::image::{ImageGray, ImageRgb};
use super::IoError;
use std::fs;
use std::path::Path;

pub fn write_ppm(path: &Path, img: &ImageRgb) -> Result<(), IoError> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_pgm(path: &Path, img: &ImageGray) -> Result<(), IoError> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    fs::write(path, bytes)?;
    Ok(())
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Parser<'a> {
    fn fail(&self, detail: impl Into<String>) -> IoError {
        IoError::Malformed {
            path: self.path.clone(),
            detail: detail.into(),
            offset: self.pos,
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_number(&mut self) -> Result<usize, IoError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail("expected integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail("bad integer"))
    }
}

fn read_header<'a>(bytes: &'a [u8], path: &Path, magic: &[u8]) -> Result<(Parser<'a>, usize, usize), IoError> {
    let mut p = Parser {
        bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(p.fail(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    p.pos = 2;
    let width = p.read_number()?;
    let height = p.read_number()?;
    let maxval = p.read_number()?;
    if maxval != 255 {
        return Err(p.fail(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header from pixel data
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.fail("missing header terminator"));
    }
    p.pos += 1;
    Ok((p, width, height))
}

pub fn read_ppm(path: &Path) -> Result<ImageRgb, IoError> {
    let bytes = fs::read(path)?;
    let (p, width, height) = read_header(&bytes, path, b"P6")?;
    let need = width * height * 3;
    if bytes.len() - p.pos < need {
        return Err(p.fail(format!("truncated pixel data, need {need} bytes")));
    }
    Ok(ImageRgb {
        width,
        height,
        data: bytes[p.pos..p.pos + need].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<ImageGray, IoError> {
    let bytes = fs::read(path)?;
    let (p, width, height) = read_header(&bytes, path, b"P5")?;
    let need = width * height;
    if bytes.len() - p.pos < need {
        return Err(p.fail(format!("truncated pixel data, need {need} bytes")));
    }
    Ok(ImageGray {
        width,
        height,
        data: bytes[p.pos..p.pos + need].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join("fskd-ppm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = ImageRgb::new(4, 3);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 7 % 256) as u8;
        }
        let path = dir.join("roundtrip.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join("fskd-ppm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = ImageGray::new(5, 2);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 31 % 256) as u8;
        }
        let path = dir.join("roundtrip.pgm");
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn malformed_header_reports_offset() {
        let dir = std::env::temp_dir().join("fskd-ppm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ppm");
        std::fs::write(&path, b"P6\n4 x\n255\n").unwrap();
        match read_ppm(&path) {
            Err(IoError::Malformed { offset, .. }) => assert!(offset > 0),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
