//! PGM (P2/P5) and 8-bit grayscale PNG ingestion; PGM writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::GrayImage;
use crate::error::{Error, Result};

pub fn load_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        return parse_pgm(&bytes, path);
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        return parse_png(&bytes, path);
    }
    Err(Error::IngestionAt {
        path: path.display().to_string(),
        offset: 0,
        detail: "unsupported format (want PGM P2/P5 or PNG)".into(),
    })
}

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmCursor<'a> {
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn next_uint(&mut self) -> Option<(usize, u64)> {
        self.skip_separators();
        let start = self.pos;
        let mut value: u64 = 0;
        let mut any = false;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .saturating_mul(10)
                .saturating_add((self.bytes[self.pos] - b'0') as u64);
            self.pos += 1;
            any = true;
        }
        if any {
            Some((start, value))
        } else {
            None
        }
    }
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let at = |offset: usize, detail: String| Error::IngestionAt {
        path: path.display().to_string(),
        offset: offset as u64,
        detail,
    };
    let binary = bytes.starts_with(b"P5");
    let mut cur = PgmCursor { bytes, pos: 2 };

    let (off_w, width) = cur
        .next_uint()
        .ok_or_else(|| at(cur.pos, "missing width".into()))?;
    let (_, height) = cur
        .next_uint()
        .ok_or_else(|| at(cur.pos, "missing height".into()))?;
    let (off_mv, maxval) = cur
        .next_uint()
        .ok_or_else(|| at(cur.pos, "missing maxval".into()))?;
    if width == 0 || height == 0 {
        return Err(at(off_w, format!("bad dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(at(off_mv, format!("maxval {maxval} outside 1..=65535")));
    }
    let (w, h) = (width as usize, height as usize);
    let mv = maxval as f64;
    let mut data = Vec::with_capacity(w * h);

    if binary {
        // exactly one whitespace byte separates the header from the raster
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(at(cur.pos, "missing raster separator".into()));
        }
        cur.pos += 1;
        let wide = maxval > 255;
        let per = if wide { 2 } else { 1 };
        let need = w * h * per;
        if bytes.len() < cur.pos + need {
            return Err(at(
                bytes.len(),
                format!("raster truncated: want {need} bytes, have {}", bytes.len() - cur.pos),
            ));
        }
        for i in 0..w * h {
            let base = cur.pos + i * per;
            let raw = if wide {
                // 16-bit PGM samples are big-endian
                ((bytes[base] as u64) << 8) | bytes[base + 1] as u64
            } else {
                bytes[base] as u64
            };
            if raw > maxval {
                return Err(at(base, format!("sample {raw} exceeds maxval {maxval}")));
            }
            data.push(raw as f64 / mv);
        }
    } else {
        for _ in 0..w * h {
            let (off, v) = cur
                .next_uint()
                .ok_or_else(|| at(cur.pos, "raster truncated".into()))?;
            if v > maxval {
                return Err(at(off, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 / mv);
        }
    }
    GrayImage::new(w, h, data)
}

fn parse_png(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(
        |e| Error::Ingestion {
            path: path.display().to_string(),
            detail: format!("PNG decode failed: {e}"),
        },
    )?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            GrayImage::new(w, h, data)
        }
        other => Err(Error::Ingestion {
            path: path.display().to_string(),
            detail: format!(
                "unsupported PNG pixel format {:?}; want 8-bit grayscale",
                other.color()
            ),
        }),
    }
}

/// Binary P5 writer. `maxval` must be 255 or 65535; images whose intensities
/// are multiples of 1/maxval round-trip bit-identically.
pub fn save_pgm(img: &GrayImage, path: &Path, maxval: u16) -> Result<()> {
    if maxval != 255 && maxval != 65535 {
        return Err(Error::invalid("save_pgm", "maxval must be 255 or 65535"));
    }
    let mut out = Vec::with_capacity(img.width() * img.height() * 2 + 32);
    write!(out, "P5\n{} {}\n{}\n", img.width(), img.height(), maxval)?;
    let mv = maxval as f64;
    for &v in img.data() {
        let q = (v * mv).round() as u32;
        if maxval > 255 {
            out.push((q >> 8) as u8);
            out.push((q & 0xff) as u8);
        } else {
            out.push(q as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ascii_p2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, "P2\n# comment\n2 2\n255\n0 255\n255 0\n").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn parses_binary_p5_16bit_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x00, 0x00, 0xff, 0xff]);
        fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn corrupt_header_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, "P5\n2 2\n").unwrap(); // maxval missing
        match load_image(&path).unwrap_err() {
            Error::IngestionAt { offset, .. } => assert_eq!(offset, 7),
            other => panic!("wrong error {other}"),
        }

        fs::write(&path, "P5\n3 3\n255\n\0\0").unwrap(); // raster truncated
        match load_image(&path).unwrap_err() {
            Error::IngestionAt { detail, .. } => assert!(detail.contains("truncated")),
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn rejects_unknown_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"JUNKJUNK").unwrap();
        assert!(matches!(
            load_image(&path).unwrap_err(),
            Error::IngestionAt { offset: 0, .. }
        ));
    }

    #[test]
    fn pgm_round_trip_bit_identical() {
        // intensities on the 1/255 grid survive save/load exactly
        let img = GrayImage::from_fn(9, 7, |x, y| ((x * 31 + y * 17) % 256) as f64 / 255.0)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.pgm");
        save_pgm(&img, &path, 255).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img, back);

        // and on the 16-bit grid
        let img = GrayImage::from_fn(5, 4, |x, y| ((x * 9001 + y * 777) % 65536) as f64 / 65535.0)
            .unwrap();
        save_pgm(&img, &path, 65535).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn loads_png_gray8() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let mut buf = image::GrayImage::new(3, 2);
        for (i, p) in buf.pixels_mut().enumerate() {
            p.0[0] = (i * 40) as u8;
        }
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.width(), 3);
        assert_eq!(img.height(), 2);
        assert!((img.get(1, 0) - 40.0 / 255.0).abs() < 1e-12);
    }
}
