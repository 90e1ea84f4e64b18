//! 16-bit binary PGM (P5, maxval 65535), the image interchange format.
//! Pixels are stored as round(value * 65535) in the big-endian byte
//! order the Netpbm format prescribes. The reader also accepts 8-bit
//! files so externally acquired images can be fed in directly.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pamdn_core::Tensor;

pub fn write_pgm16(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = img
        .dims2()
        .with_context(|| format!("writing {}", path.display()))?;
    let mut out = Vec::with_capacity(32 + 2 * h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_pgm16(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pgm(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PGM header");
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(bytes)?;
    if magic != "P5" {
        bail!("not a binary PGM (magic {magic:?})");
    }
    let w: usize = next_token(bytes)?.parse().context("PGM width")?;
    let h: usize = next_token(bytes)?.parse().context("PGM height")?;
    let maxval: u32 = next_token(bytes)?.parse().context("PGM maxval")?;
    if maxval == 0 || maxval > 65535 {
        bail!("PGM maxval {maxval} out of range");
    }
    // exactly one whitespace byte between header and raster
    pos += 1;
    let data = &bytes[pos.min(bytes.len())..];
    let wide = maxval > 255;
    let expect = h * w * if wide { 2 } else { 1 };
    if data.len() != expect {
        bail!("PGM raster is {} bytes, expected {expect}", data.len());
    }
    let scale = 1.0 / maxval as f64;
    let mut values = Vec::with_capacity(h * w);
    if wide {
        for px in data.chunks_exact(2) {
            values.push(u16::from_be_bytes([px[0], px[1]]) as f64 * scale);
        }
    } else {
        for &px in data {
            values.push(px as f64 * scale);
        }
    }
    Ok(Tensor::from_vec(&[h, w], values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pamdn_core::rng::Rng;

    #[test]
    fn round_trip_is_exact_at_16_bit_resolution() {
        let dir = tempdir();
        let path = dir.join("img.pgm");
        let mut rng = Rng::new(3);
        let img =
            Tensor::from_vec(&[5, 7], (0..35).map(|_| rng.uniform()).collect()).unwrap();
        write_pgm16(&path, &img).unwrap();
        let back = read_pgm16(&path).unwrap();
        assert_eq!(back.shape(), &[5, 7]);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        // quantized values survive a second trip bit-exactly
        write_pgm16(&path, &back).unwrap();
        let twice = read_pgm16(&path).unwrap();
        assert_eq!(twice.data(), back.data());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn reads_8_bit_files_and_comments() {
        let dir = tempdir();
        let path = dir.join("small.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 2\n255\n\x00\x7f\xff\x40").unwrap();
        let img = read_pgm16(&path).unwrap();
        assert_eq!(img.shape(), &[2, 2]);
        assert!((img.data()[1] - 127.0 / 255.0).abs() < 1e-12);
        assert_eq!(img.data()[2], 1.0);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn rejects_malformed_headers() {
        let dir = tempdir();
        let path = dir.join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\n....").unwrap();
        assert!(read_pgm16(&path).is_err());
        std::fs::write(&path, b"P5\n2 2\n255\n\x00").unwrap();
        assert!(read_pgm16(&path).is_err());
        std::fs::remove_dir_all(dir).ok();
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "pamdn-pgm-test-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
